"""Forward splatting and the full backward pass.

Per pixel the renderer gathers every surfel whose cutoff disc can cover the
pixel's tile, intersects exactly, sorts hits by depth (ties broken on surfel
index), and composites front to back:

    alpha = clamp(G(p) * alpha_fn(p), 0, alpha_ceiling)
    color += T * alpha * (SH(d) + F_c(p));  T *= 1 - alpha

stopping once T drops under the transmittance floor and finishing with
T * background.  ``alpha_fn`` is sigmoid(stored) for the constant variant and
the raw spatially varying opacity clamped at zero otherwise (the
``allow_signed_alpha`` research flag removes that lower clamp).

The backward pass replays each pixel, walks the composited samples in
reverse, and scatters analytic gradients into per-candidate instance rows;
tiles own disjoint row ranges, so the threaded pass is race-free and the
final fixed-order merge makes results bit-reproducible for any thread count.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .backend import NUMBA_ENABLED, render_threads
from .geometry import quat_to_rot
from .scene import GradientBuffer
from .sh import n_coeffs, sh_basis, sh_basis_grad


@dataclass
class RenderConfig:
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    transmittance_floor: float = 1e-4
    alpha_ceiling: float = 0.99
    alpha_floor: float = 1.0 / 255.0
    uv_cutoff: float = 3.0
    tile_size: int = 16
    allow_signed_alpha: bool = False

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if not 0.0 < self.alpha_floor < self.alpha_ceiling < 1.0:
            raise ValueError("need 0 < alpha_floor < alpha_ceiling < 1")
        if not 0.0 < self.transmittance_floor < 1.0:
            raise ValueError("transmittance_floor must lie in (0, 1)")
        if self.tile_size < 1:
            raise ValueError("tile_size must be at least 1")


@dataclass
class RenderOutput:
    color: np.ndarray             # (H, W, 3) linear, unclamped
    alpha_accum: np.ndarray       # (H, W) accumulated opacity = 1 - T
    contributor_count: np.ndarray  # (H, W) composited samples per pixel


_POOLS = {}


def _pool(workers):
    pool = _POOLS.get(workers)
    if pool is None:
        pool = ThreadPoolExecutor(max_workers=workers)
        _POOLS[workers] = pool
    return pool


def _check_finite(scene):
    for name, arr in scene.trainable_arrays().items():
        flat = arr.reshape(scene.n, -1)
        ok = np.isfinite(flat).all(axis=1)
        if not ok.all():
            bad = int(np.argmin(ok))
            raise ValueError(f"non-finite {name} parameter on surfel {bad}")


def _prepare(scene, camera, config):
    """Per-view precomputation shared by the forward and backward passes."""
    rots = quat_to_rot(scene.quats)
    scales = np.exp(scene.log_scales)

    rel = scene.centers - camera.origin
    dist = np.linalg.norm(rel, axis=1)
    safe = np.maximum(dist, 1e-12)
    dirs = rel / safe[:, None]
    dirs[dist < 1e-12] = camera.rotation[:, 2]

    deg = min(scene.active_sh_degree, scene.sh_degree)
    basis = sh_basis(dirs, deg)
    sh_act = scene.sh[:, :n_coeffs(deg), :]
    base_rgb = np.einsum("nc,nch->nh", basis, sh_act) + 0.5

    cam_pts = rel @ camera.rotation  # camera-space centers (R^T rel)
    zc = cam_pts[:, 2]

    bound = config.uv_cutoff * scales.max(axis=1)
    valid = zc + bound > kernels.NEAR_PLANE

    ts = config.tile_size
    ntx = (camera.width + ts - 1) // ts
    nty = (camera.height + ts - 1) // ts

    n = scene.n
    rects = np.zeros((n, 4), dtype=np.int64)
    crosses = zc - bound <= kernels.NEAR_PLANE
    with np.errstate(divide="ignore", invalid="ignore"):
        x_lo = cam_pts[:, 0] - bound
        x_hi = cam_pts[:, 0] + bound
        y_lo = cam_pts[:, 1] - bound
        y_hi = cam_pts[:, 1] + bound
        z_lo = np.maximum(zc - bound, kernels.NEAR_PLANE)
        z_hi = zc + bound
        px_lo = camera.fx * np.where(x_lo >= 0, x_lo / z_hi, x_lo / z_lo) + camera.cx
        px_hi = camera.fx * np.where(x_hi >= 0, x_hi / z_lo, x_hi / z_hi) + camera.cx
        py_lo = camera.fy * np.where(y_lo >= 0, y_lo / z_hi, y_lo / z_lo) + camera.cy
        py_hi = camera.fy * np.where(y_hi >= 0, y_hi / z_lo, y_hi / z_hi) + camera.cy
    px_lo = np.where(crosses, -1.0, px_lo - 1.0)
    px_hi = np.where(crosses, camera.width + 1.0, px_hi + 1.0)
    py_lo = np.where(crosses, -1.0, py_lo - 1.0)
    py_hi = np.where(crosses, camera.height + 1.0, py_hi + 1.0)
    valid &= (px_hi >= 0) & (px_lo < camera.width)
    valid &= (py_hi >= 0) & (py_lo < camera.height)
    rects[:, 0] = np.clip(np.floor(px_lo / ts), 0, ntx - 1)
    rects[:, 1] = np.clip(np.floor(px_hi / ts), 0, ntx - 1)
    rects[:, 2] = np.clip(np.floor(py_lo / ts), 0, nty - 1)
    rects[:, 3] = np.clip(np.floor(py_hi / ts), 0, nty - 1)

    n_tiles = ntx * nty
    counts = np.zeros(n_tiles, dtype=np.int64)
    kernels.bin_count(rects, valid, ntx, counts)
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    items = np.zeros(int(offsets[-1]), dtype=np.int64)
    cursor = np.zeros(n_tiles, dtype=np.int64)
    kernels.bin_fill(rects, valid, ntx, offsets, cursor, items)
    max_cand = int(counts.max()) if n_tiles else 0

    return {
        "rots": rots, "scales": scales, "dirs": dirs, "dist": safe,
        "basis": basis, "base_rgb": base_rgb, "deg": deg, "zc": zc,
        "ntx": ntx, "nty": nty, "offsets": offsets, "items": items,
        "max_cand": max(max_cand, 1),
    }


def _run_tiles(func, n_tiles, args):
    workers = render_threads()
    if workers <= 1 or not NUMBA_ENABLED or n_tiles < 2:
        func(0, n_tiles, *args)
        return
    chunks = min(n_tiles, workers * 4)
    bounds = np.linspace(0, n_tiles, chunks + 1).astype(np.int64)
    pool = _pool(workers)
    futures = [pool.submit(func, int(bounds[i]), int(bounds[i + 1]), *args)
               for i in range(chunks) if bounds[i] < bounds[i + 1]]
    for f in futures:
        f.result()


def render(scene, camera, config=None):
    """Splat the scene into an image (see module docstring for the model)."""
    if config is None:
        config = RenderConfig()
    h, w = camera.height, camera.width
    color = np.empty((h, w, 3))
    alpha = np.zeros((h, w))
    count = np.zeros((h, w), dtype=np.int32)
    if scene.n == 0:
        color[:] = config.background
        return RenderOutput(color, alpha, count)
    _check_finite(scene)
    pre = _prepare(scene, camera, config)
    n_tiles = pre["ntx"] * pre["nty"]
    args = (pre["ntx"], config.tile_size, h, w,
            camera.origin, camera.rotation,
            camera.fx, camera.fy, camera.cx, camera.cy,
            scene.centers, pre["rots"], pre["scales"], pre["base_rgb"],
            scene.svf, scene.tag, scene.k, scene.hidden, scene.lambda_e,
            pre["offsets"], pre["items"], pre["max_cand"],
            config.uv_cutoff ** 2, config.alpha_floor, config.alpha_ceiling,
            config.transmittance_floor, config.allow_signed_alpha,
            config.background, color, alpha, count)
    _run_tiles(kernels.forward_range, n_tiles, args)
    return RenderOutput(color, alpha, count)


def render_backward(scene, camera, config, d_color):
    """Exact reverse-mode gradient of ``render`` w.r.t. every scene scalar.

    Args:
        d_color: cotangent on the output color image, shape (H, W, 3).

    Returns:
        A GradientBuffer mirroring the scene, including the per-surfel
        screen-space positional gradient magnitude used by densification.
    """
    if config is None:
        config = RenderConfig()
    h, w = camera.height, camera.width
    d_color = np.asarray(d_color, dtype=np.float64)
    if d_color.shape != (h, w, 3):
        raise ValueError(f"d_color shape {d_color.shape} does not match "
                         f"render target ({h}, {w}, 3)")
    grads = GradientBuffer.zeros_for(scene)
    if scene.n == 0:
        return grads
    _check_finite(scene)
    pre = _prepare(scene, camera, config)
    n_tiles = pre["ntx"] * pre["nty"]
    items = pre["items"]
    n_inst = items.size
    width = kernels.GEOM_COLS + scene.svf.shape[1]
    inst_grad = np.zeros((max(n_inst, 1), width))
    inst_contrib = np.zeros(max(n_inst, 1), dtype=np.int64)
    args = (pre["ntx"], config.tile_size, h, w,
            camera.origin, camera.rotation,
            camera.fx, camera.fy, camera.cx, camera.cy,
            scene.centers, scene.quats, pre["rots"], pre["scales"],
            pre["base_rgb"], scene.svf,
            scene.tag, scene.k, scene.hidden, scene.lambda_e,
            pre["offsets"], items, pre["max_cand"],
            config.uv_cutoff ** 2, config.alpha_floor, config.alpha_ceiling,
            config.transmittance_floor, config.allow_signed_alpha,
            config.background, d_color, inst_grad, inst_contrib)
    _run_tiles(kernels.backward_range, n_tiles, args)

    if n_inst:
        np.add.at(grads.d_centers, items, inst_grad[:n_inst, 0:3])
        np.add.at(grads.d_quats, items, inst_grad[:n_inst, 3:7])
        np.add.at(grads.d_log_scales, items, inst_grad[:n_inst, 7:9])
        np.add.at(grads.d_svf, items, inst_grad[:n_inst, kernels.GEOM_COLS:])
        np.add.at(grads.n_contrib, items, inst_contrib[:n_inst])
        d_rgb = np.zeros((scene.n, 3))
        np.add.at(d_rgb, items, inst_grad[:n_inst, 9:12])

        # chain the per-surfel color cotangent into SH coefficients and,
        # through the view direction, back into the center
        deg = pre["deg"]
        c_act = n_coeffs(deg)
        grads.d_sh[:, :c_act, :] = pre["basis"][:, :, None] * d_rgb[:, None, :]
        dbasis = sh_basis_grad(pre["dirs"], deg)
        sh_act = scene.sh[:, :c_act, :]
        d_dir = np.einsum("nca,nch,nh->na", dbasis, sh_act, d_rgb)
        dirs = pre["dirs"]
        proj = d_dir - dirs * np.sum(d_dir * dirs, axis=1, keepdims=True)
        grads.d_centers += proj / pre["dist"][:, None]

    # densification signal: |dL/d screen position| in half-image (NDC) units
    zc = pre["zc"]
    visible = grads.n_contrib > 0
    if visible.any():
        dc = grads.d_centers
        gx = (dc @ camera.rotation[:, 0]) * zc / camera.fx * (w / 2.0)
        gy = (dc @ camera.rotation[:, 1]) * zc / camera.fy * (h / 2.0)
        grads.screen_grad = np.where(visible, np.hypot(gx, gy), 0.0)
    return grads
