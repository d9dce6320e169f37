"""Synthetic dataset generators backed by a tiny analytic ray tracer.

The tracer shares no code with the splatting renderer, so fitting
experiments measure the splats against an independent ground truth.

Kinds:
  disc4          one view of a circle split into four solid-color quadrants
  textured_quad  several views of a planar quad carrying a seeded smooth
                 procedural texture
  checker_sphere several views of a lat-long checkered sphere
"""

import os

import numpy as np

from .datasets import write_image, write_manifest
from .geometry import look_at

KINDS = ("disc4", "textured_quad", "checker_sphere")

DISC_COLORS = np.array([
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.20],
    [0.20, 0.30, 0.85],
    [0.90, 0.80, 0.20],
])


def _pose(eye, target, up=(0.0, 1.0, 0.0)):
    m = np.eye(4)
    m[:3, :3] = look_at(eye, target, up)
    m[:3, 3] = np.asarray(eye, dtype=np.float64)
    return m


def _rays(width, height, fx, fy, cx, cy, pose):
    xs = (np.arange(width) + 0.5 - cx) / fx
    ys = (np.arange(height) + 0.5 - cy) / fy
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    dirs = d_cam @ pose[:3, :3].T
    return pose[:3, 3], dirs


def _plane(origin, dirs, background, shade):
    """Trace rays against the z=0 plane; ``shade(x, y, mask)`` colors hits."""
    img = np.broadcast_to(background, dirs.shape[:2] + (3,)).copy()
    dz = dirs[..., 2]
    ok = np.abs(dz) > 1e-12
    t = np.where(ok, -origin[2] / np.where(ok, dz, 1.0), -1.0)
    ok &= t > 0
    x = origin[0] + t * dirs[..., 0]
    y = origin[1] + t * dirs[..., 1]
    color, mask = shade(x, y, ok)
    img[mask] = color[mask]
    return img


def _disc4_image(width, height, fx, fy, cx, cy, pose, background):
    origin, dirs = _rays(width, height, fx, fy, cx, cy, pose)

    def shade(x, y, ok):
        inside = ok & (x * x + y * y <= 1.0)
        quad = (x >= 0).astype(int) * 2 + (y >= 0).astype(int)
        return DISC_COLORS[quad], inside

    return _plane(origin, dirs, background, shade)


def _bilerp_grid(grid, x, y):
    """Bilinear interpolation of a (R, R, 3) grid over [-1, 1]^2."""
    r = grid.shape[0]
    fx = np.clip((x + 1.0) * 0.5, 0.0, 1.0) * (r - 1)
    fy = np.clip((y + 1.0) * 0.5, 0.0, 1.0) * (r - 1)
    x0 = np.clip(np.floor(fx).astype(int), 0, r - 2)
    y0 = np.clip(np.floor(fy).astype(int), 0, r - 2)
    ax = (fx - x0)[..., None]
    ay = (fy - y0)[..., None]
    g00 = grid[y0, x0]
    g01 = grid[y0, x0 + 1]
    g10 = grid[y0 + 1, x0]
    g11 = grid[y0 + 1, x0 + 1]
    return ((1 - ay) * ((1 - ax) * g00 + ax * g01)
            + ay * ((1 - ax) * g10 + ax * g11))


def _quad_image(width, height, fx, fy, cx, cy, pose, background, grids):
    origin, dirs = _rays(width, height, fx, fy, cx, cy, pose)
    fine, coarse = grids

    def shade(x, y, ok):
        inside = ok & (np.abs(x) <= 1.0) & (np.abs(y) <= 1.0)
        tex = 0.55 * _bilerp_grid(fine, x, y) + 0.45 * _bilerp_grid(coarse, x, y)
        return np.clip(tex, 0.03, 0.97), inside

    return _plane(origin, dirs, background, shade)


def _sphere_image(width, height, fx, fy, cx, cy, pose, background,
                  radius=1.0, colors=((0.9, 0.9, 0.9), (0.1, 0.1, 0.5))):
    origin, dirs = _rays(width, height, fx, fy, cx, cy, pose)
    img = np.broadcast_to(np.asarray(background), dirs.shape[:2] + (3,)).copy()
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * np.sum(dirs * origin, axis=-1)
    c = origin @ origin - radius * radius
    disc = b * b - 4 * a * c
    hit = disc > 0
    t = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0.0))) / (2 * a), -1.0)
    hit &= t > 0
    pts = origin + t[..., None] * dirs
    theta = np.arccos(np.clip(pts[..., 2] / radius, -1.0, 1.0))
    phi = np.arctan2(pts[..., 1], pts[..., 0])
    check = (np.floor(theta / np.pi * 6) + np.floor((phi + np.pi) / (2 * np.pi) * 12)) % 2
    ca = np.asarray(colors[0])
    cb = np.asarray(colors[1])
    shaded = np.where(check[..., None] > 0.5, cb, ca)
    img[hit] = shaded[hit]
    return img


def make_synthetic(kind, out_dir, seed=0, size=None, views=None):
    """Generate a dataset on disk; returns the manifest path."""
    if kind not in KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {KINDS}")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)

    if kind == "disc4":
        size = size or 64
        background = np.array([0.5, 0.5, 0.5])
        fx = fy = size * 1.125
        cx = cy = size / 2.0
        poses = [_pose((0.0, 0.0, -3.0), (0.0, 0.0, 0.0))]
        render = lambda pose: _disc4_image(size, size, fx, fy, cx, cy, pose, background)
    elif kind == "textured_quad":
        size = size or 128
        views = views or 8
        background = np.array([0.25, 0.25, 0.25])
        fx = fy = size * 1.2
        cx = cy = size / 2.0
        grids = (rng.uniform(0.0, 1.0, (16, 16, 3)),
                 rng.uniform(0.0, 1.0, (4, 4, 3)))
        dist = 3.0
        poses = []
        for i in range(views):
            alpha = np.deg2rad(10.0 + 15.0 * (i % 2))
            phi = 2.0 * np.pi * i / views
            eye = dist * np.array([np.sin(alpha) * np.cos(phi),
                                   np.sin(alpha) * np.sin(phi),
                                   -np.cos(alpha)])
            poses.append(_pose(eye, (0.0, 0.0, 0.0)))
        render = lambda pose: _quad_image(size, size, fx, fy, cx, cy, pose,
                                          background, grids)
    else:  # checker_sphere
        size = size or 64
        views = views or 8
        background = np.array([0.1, 0.15, 0.1])
        fx = fy = size * 1.4
        cx = cy = size / 2.0
        dist = 3.5
        poses = []
        for i in range(views):
            phi = 2.0 * np.pi * i / views
            elev = np.deg2rad(-20.0 + 40.0 * i / max(views - 1, 1))
            eye = dist * np.array([np.cos(elev) * np.cos(phi),
                                   np.sin(elev),
                                   np.cos(elev) * np.sin(phi)])
            poses.append(_pose(eye, (0.0, 0.0, 0.0)))
        render = lambda pose: _sphere_image(size, size, fx, fy, cx, cy, pose,
                                            background)

    frames = []
    for i, pose in enumerate(poses):
        name = f"view_{i:03d}.png"
        write_image(os.path.join(out_dir, name), render(pose))
        frames.append((name, pose))
    manifest = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest, size, size, fx, fy, cx, cy, frames,
                   srgb=False, background=background)
    return manifest
