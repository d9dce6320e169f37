"""Scene storage: parallel arrays over surfels, plus the gradient buffer.

All trainable state is float64.  One scene holds a single appearance variant;
``svf[i]`` is the packed per-surfel parameter row (layout in kernels.py).
"""

from dataclasses import dataclass

import numpy as np

from . import appearance as ap
from .geometry import SurfelGeometry, normalize_quats, random_quats
from .sh import SH_C0, n_coeffs


def logit(p):
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return np.log(p / (1.0 - p))


@dataclass
class Scene:
    variant: str
    centers: np.ndarray      # (N, 3)
    quats: np.ndarray        # (N, 4) unit (w, x, y, z)
    log_scales: np.ndarray   # (N, 2)
    sh: np.ndarray           # (N, C, 3) with C = (sh_degree+1)^2
    svf: np.ndarray          # (N, P)
    k: int = ap.DEFAULT_KERNEL_COUNT
    hidden: int = ap.DEFAULT_HIDDEN
    lambda_e: float = ap.DEFAULT_LAMBDA_E
    sh_degree: int = 3
    active_sh_degree: int = 3

    def __post_init__(self):
        if self.variant not in ap.VARIANT_TAGS:
            raise ValueError(f"unknown appearance variant {self.variant!r}")
        n = self.centers.shape[0]
        expected_svf = ap.svf_width(self.variant, self.k, self.hidden)
        if self.svf.shape != (n, expected_svf):
            raise ValueError(f"svf shape {self.svf.shape} does not match "
                             f"({n}, {expected_svf}) for variant {self.variant!r}")
        if self.sh.shape != (n, n_coeffs(self.sh_degree), 3):
            raise ValueError(f"sh shape {self.sh.shape} does not match degree "
                             f"{self.sh_degree} with {n} surfels")

    @property
    def n(self):
        return self.centers.shape[0]

    @property
    def tag(self):
        return ap.VARIANT_TAGS[self.variant]

    @property
    def scales(self):
        return np.exp(self.log_scales)

    def copy(self):
        return Scene(self.variant, self.centers.copy(), self.quats.copy(),
                     self.log_scales.copy(), self.sh.copy(), self.svf.copy(),
                     self.k, self.hidden, self.lambda_e,
                     self.sh_degree, self.active_sh_degree)

    def select(self, idx):
        """New scene containing the given surfel rows (copy)."""
        return Scene(self.variant, self.centers[idx].copy(), self.quats[idx].copy(),
                     self.log_scales[idx].copy(), self.sh[idx].copy(),
                     self.svf[idx].copy(), self.k, self.hidden, self.lambda_e,
                     self.sh_degree, self.active_sh_degree)

    def concat(self, other):
        if other.variant != self.variant or other.svf.shape[1] != self.svf.shape[1]:
            raise ValueError("cannot concatenate scenes of different variants")
        return Scene(self.variant,
                     np.concatenate([self.centers, other.centers]),
                     np.concatenate([self.quats, other.quats]),
                     np.concatenate([self.log_scales, other.log_scales]),
                     np.concatenate([self.sh, other.sh]),
                     np.concatenate([self.svf, other.svf]),
                     self.k, self.hidden, self.lambda_e,
                     self.sh_degree, self.active_sh_degree)

    def surfel(self, i):
        return SurfelGeometry(self.centers[i], self.quats[i],
                              np.exp(self.log_scales[i]))

    def appearance(self, i):
        sh = ap.ShCoefficients(self.sh_degree, self.sh[i].copy())
        row = self.svf[i]
        if self.variant == "constant":
            params = ap.ConstantParams(float(row[0]))
        elif self.variant == "bilinear":
            params = ap.BilinearParams.from_row(row)
        elif self.variant in ("mk", "mk-sigmoid"):
            form = "sigmoid" if self.variant == "mk-sigmoid" else "exponential"
            params = ap.MovableKernelParams.from_row(row, self.lambda_e, form)
        else:
            params = ap.TinyMlpParams.from_row(row, self.hidden)
        return ap.Appearance(sh, params)

    def trainable_arrays(self):
        """Name -> array view of every trainable parameter group."""
        return {"centers": self.centers, "quats": self.quats,
                "log_scales": self.log_scales, "sh": self.sh, "svf": self.svf}


@dataclass
class GradientBuffer:
    """Mirror of every trainable scalar, plus densification bookkeeping."""

    d_centers: np.ndarray
    d_quats: np.ndarray
    d_log_scales: np.ndarray
    d_sh: np.ndarray
    d_svf: np.ndarray
    screen_grad: np.ndarray  # (N,) |d loss / d screen position| per surfel
    n_contrib: np.ndarray    # (N,) composited samples in this view

    @classmethod
    def zeros_for(cls, scene):
        return cls(np.zeros_like(scene.centers), np.zeros_like(scene.quats),
                   np.zeros_like(scene.log_scales), np.zeros_like(scene.sh),
                   np.zeros_like(scene.svf), np.zeros(scene.n),
                   np.zeros(scene.n, dtype=np.int64))

    def arrays(self):
        return {"centers": self.d_centers, "quats": self.d_quats,
                "log_scales": self.d_log_scales, "sh": self.d_sh,
                "svf": self.d_svf}


def init_svf_rows(variant, n, k, hidden, base_opacity, rng):
    """Initial packed parameter rows.

    Every variant starts out rendering like a plain constant-opacity surfel:
    bilinear corners share the base opacity with zero color delta, movable
    kernels sit at the quadrant centers with the opacity split evenly, and the
    MLP starts near-zero with its opacity bias at the base value.
    """
    if variant == "constant":
        return np.full((n, 1), logit(base_opacity))
    if variant == "bilinear":
        row = np.zeros(17)
        row[12:16] = base_opacity
        row[16] = ap.DEFAULT_LAMBDA_S
        return np.tile(row, (n, 1))
    if variant in ("mk", "mk-sigmoid"):
        row = np.zeros(6 * k)
        angles = np.deg2rad(45.0) + 2.0 * np.pi * np.arange(k) / k
        radius = np.sqrt(0.5)
        row[0:2 * k:2] = radius * np.cos(angles)
        row[1:2 * k:2] = radius * np.sin(angles)
        row[5 * k:] = base_opacity / k
        return np.tile(row, (n, 1))
    if variant == "mlp":
        width = ap.svf_width("mlp", hidden=hidden)
        rows = rng.uniform(-0.1, 0.1, size=(n, width))
        rows[:, -1] = base_opacity
        return rows
    raise ValueError(f"unknown appearance variant {variant!r}")


def make_scene(variant, centers, quats, scales, *, base_color=(0.5, 0.5, 0.5),
               base_opacity=0.1, k=ap.DEFAULT_KERNEL_COUNT,
               hidden=ap.DEFAULT_HIDDEN, lambda_e=ap.DEFAULT_LAMBDA_E,
               sh_degree=3, active_sh_degree=None, seed=0):
    """Build a scene from geometry arrays with default-initialized appearance."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    n = centers.shape[0]
    quats = normalize_quats(np.asarray(quats, dtype=np.float64).reshape(n, 4))
    scales = np.asarray(scales, dtype=np.float64).reshape(n, 2)
    if not np.all(scales > 0):
        raise ValueError("scales must be strictly positive")
    rng = np.random.default_rng(seed)
    sh = np.zeros((n, n_coeffs(sh_degree), 3))
    sh[:, 0, :] = (np.asarray(base_color, dtype=np.float64) - 0.5) / SH_C0
    svf = init_svf_rows(variant, n, k, hidden, base_opacity, rng)
    if active_sh_degree is None:
        active_sh_degree = sh_degree
    return Scene(variant, centers, quats, np.log(scales), sh, svf,
                 k=k, hidden=hidden, lambda_e=lambda_e,
                 sh_degree=sh_degree, active_sh_degree=active_sh_degree)


def empty_scene(variant, k=ap.DEFAULT_KERNEL_COUNT, hidden=ap.DEFAULT_HIDDEN,
                lambda_e=ap.DEFAULT_LAMBDA_E, sh_degree=3):
    width = ap.svf_width(variant, k, hidden)
    return Scene(variant, np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)),
                 np.zeros((0, n_coeffs(sh_degree), 3)), np.zeros((0, width)),
                 k=k, hidden=hidden, lambda_e=lambda_e, sh_degree=sh_degree,
                 active_sh_degree=sh_degree)


def seed_scene(variant, dataset_cameras, n_init, *, seed=0, base_opacity=0.1,
               k=ap.DEFAULT_KERNEL_COUNT, hidden=ap.DEFAULT_HIDDEN,
               lambda_e=ap.DEFAULT_LAMBDA_E, sh_degree=3):
    """Random initial scene sized from the camera rig.

    Centers sample a ball around the mean camera look-at point (a single
    surfel is placed exactly there, facing the mean camera); scales shrink
    with surfel count so the initial footprints tile the working volume.
    """
    rng = np.random.default_rng(seed)
    eyes = np.stack([c.origin for c in dataset_cameras])
    fwds = np.stack([c.forward_axis() for c in dataset_cameras])
    center = _rays_closest_point(eyes, fwds)
    extent = float(np.max(np.linalg.norm(eyes - center, axis=1)))
    extent = max(extent, 1e-3)

    if n_init == 1:
        centers = center[None, :]
        fwd_mean = fwds.mean(axis=0)
        fwd_mean /= np.linalg.norm(fwd_mean)
        quats = _quat_facing(-fwd_mean)[None, :]
        scales = np.full((1, 2), 0.35 * extent)
    else:
        r = 0.35 * extent * rng.uniform(0, 1, size=n_init) ** (1 / 3)
        dirs = rng.normal(size=(n_init, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        centers = center + r[:, None] * dirs
        quats = random_quats(rng, n_init)
        s = 0.9 * extent / np.sqrt(n_init)
        scales = np.full((n_init, 2), s)
    return make_scene(variant, centers, quats, scales,
                      base_opacity=base_opacity, k=k, hidden=hidden,
                      lambda_e=lambda_e, sh_degree=sh_degree,
                      seed=int(rng.integers(2 ** 31)))


def _rays_closest_point(origins, directions):
    """Least-squares point closest to a bundle of rays."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for o, d in zip(origins, directions):
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ o
    if np.linalg.matrix_rank(A) < 3:
        # parallel rays: fall back to a point ahead of the mean camera
        return origins.mean(axis=0) + directions.mean(axis=0)
    return np.linalg.solve(A, b)


def _quat_facing(normal):
    """Quaternion whose frame's n axis equals ``normal``."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    tu = np.cross(ref, n)
    tu /= np.linalg.norm(tu)
    tv = np.cross(n, tu)
    R = np.stack([tu, tv, n], axis=1)
    return _rot_to_quat(R)


def _rot_to_quat(R):
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        return np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                         (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    i = int(np.argmax(np.diag(R)))
    j, kk = (i + 1) % 3, (i + 2) % 3
    s = np.sqrt(max(R[i, i] - R[j, j] - R[kk, kk] + 1.0, 1e-12)) * 2
    q = np.empty(4)
    q[0] = (R[kk, j] - R[j, kk]) / s
    q[1 + i] = 0.25 * s
    q[1 + j] = (R[j, i] + R[i, j]) / s
    q[1 + kk] = (R[kk, i] + R[i, kk]) / s
    return q / np.linalg.norm(q)
