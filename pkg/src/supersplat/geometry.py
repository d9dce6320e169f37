"""Surfel parameterization, pinhole cameras, and ray-surfel intersection.

A surfel is a 2D Gaussian-weighted elliptical disc in 3D: a center, a unit
quaternion whose rotated frame gives the tangent axes (t_u, t_v) and normal n,
and two tangential scales.  A ray hits the surfel plane at the object-space
point p = (u, v) measured in units of standard deviation, where the falloff
weight is exp(-(u^2+v^2)/2).

Intersection is solved directly in object space (ray-plane), which is exact
and keeps the backward pass simple; the screen-space homography used by some
splatting codebases computes the same point.
"""

from dataclasses import dataclass

import numpy as np

from .kernels import (GRAZING_EPS, NEAR_PLANE, intersect_core,
                      intersect_vjp_core, quat_vjp)

DEFAULT_UV_CUTOFF = 3.0


def normalize_quats(q):
    """Renormalize quaternion rows to unit length."""
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rot(q):
    """Rotation matrices from (w, x, y, z) quaternions, normalizing first.

    Columns of the result are the frame axes (t_u, t_v, n).
    """
    q = normalize_quats(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return normalize_quats(q)


class SurfelGeometry:
    """Geometry of one surfel.  Scales are stored as logs, read as s = e^ls."""

    def __init__(self, center, rotation, scale):
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(rotation, dtype=np.float64).reshape(4)
        scale = np.asarray(scale, dtype=np.float64).reshape(2)
        if not np.all(scale > 0):
            raise ValueError(f"surfel scales must be strictly positive, got {scale}")
        self.log_scale = np.log(scale)

    @property
    def scale(self):
        return np.exp(self.log_scale)

    def frame(self):
        """(3, 3) matrix with columns (t_u, t_v, n)."""
        return quat_to_rot(self.rotation)


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-from-camera pose.

    Camera axes: +x right, +y down, +z forward (image convention).  ``origin``
    is the camera position in world coordinates, ``rotation`` maps camera
    directions to world directions.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be at least 1x1, got {self.width}x{self.height}")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)

    @classmethod
    def from_matrix(cls, width, height, fx, fy, cx, cy, world_from_camera):
        m = np.asarray(world_from_camera, dtype=np.float64).reshape(4, 4)
        return cls(width, height, fx, fy, cx, cy, m[:3, :3].copy(), m[:3, 3].copy())

    @property
    def world_from_camera(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.origin
        return m

    def pixel_ray(self, pixel):
        """World-space ray through the center of ``pixel`` = (x, y).

        The direction is un-normalized with camera-space z = 1, so the ray
        parameter equals camera-space depth.
        """
        px, py = float(pixel[0]), float(pixel[1])
        d_cam = np.array([(px + 0.5 - self.cx) / self.fx,
                          (py + 0.5 - self.cy) / self.fy,
                          1.0])
        return self.origin, self.rotation @ d_cam

    def forward_axis(self):
        return self.rotation[:, 2]


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """World-from-camera rotation for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


@dataclass
class IntersectionSample:
    """Ray-surfel hit: uv in standard-deviation units, camera-space depth,
    and the Gaussian falloff weight exp(-(u^2+v^2)/2)."""

    uv: np.ndarray
    depth: float
    gaussian_weight: float


def intersect(camera, pixel, surfel, cutoff=DEFAULT_UV_CUTOFF):
    """Intersect the ray through ``pixel`` with a surfel.

    Returns an IntersectionSample, or None for grazing rays (|d.n| below
    1e-9), hits behind the near plane, or points beyond ``cutoff`` standard
    deviations.
    """
    o, d = camera.pixel_ray(pixel)
    rot = surfel.frame()
    su, sv = np.exp(surfel.log_scale)
    hit, u, v, t, w = intersect_core(
        o[0], o[1], o[2], d[0], d[1], d[2],
        surfel.center, rot, su, sv,
        cutoff * cutoff, NEAR_PLANE, GRAZING_EPS)
    if not hit:
        return None
    return IntersectionSample(np.array([u, v]), t, w)


def intersect_vjp(camera, pixel, surfel, d_uv, d_weight,
                  cutoff=DEFAULT_UV_CUTOFF):
    """Vector-Jacobian product of ``intersect``.

    Args:
        d_uv: cotangent on the uv output, shape (2,).
        d_weight: cotangent on the gaussian weight.

    Returns:
        (d_center (3,), d_rotation (4,), d_scale (2,)) w.r.t. the surfel's
        center, raw quaternion, and linear scales.
    """
    sample = intersect(camera, pixel, surfel, cutoff)
    if sample is None:
        raise ValueError("intersect_vjp called on a ray that misses the surfel")
    o, d = camera.pixel_ray(pixel)
    rot = surfel.frame()
    su, sv = np.exp(surfel.log_scale)
    u, v = sample.uv
    w = sample.gaussian_weight
    gu = float(d_uv[0]) + d_weight * (-u * w)
    gv = float(d_uv[1]) + d_weight * (-v * w)

    d_center = np.zeros(3)
    d_rot = np.zeros((3, 3))
    d_q = np.zeros(4)
    dsu, dsv = intersect_vjp_core(
        o[0], o[1], o[2], d[0], d[1], d[2],
        surfel.center, rot, su, sv,
        u, v, sample.depth, gu, gv, d_center, d_rot)
    quat_vjp(surfel.rotation, d_rot, d_q)
    return d_center, d_q, np.array([dsu, dsv])
