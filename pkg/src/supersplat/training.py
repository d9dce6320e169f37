"""Image-fitting optimization: photometric loss, Adam, densification,
opacity resets, and the training loop."""

import time
from dataclasses import dataclass

import numpy as np

from . import metrics
from .appearance import LAMBDA_S_MIN
from .backend import FLOAT
from .geometry import normalize_quats, quat_to_rot
from .renderer import RenderConfig, render, render_backward
from .scene import logit, seed_scene

LOG_SCALE_MIN = -12.0
LOG_SCALE_MAX = 6.0

# uv probe grid used for per-variant effective opacities (prune / reset)
PROBE_PTS = np.stack(np.meshgrid(np.linspace(-1.5, 1.5, 5),
                                 np.linspace(-1.5, 1.5, 5),
                                 indexing="ij"), axis=-1).reshape(-1, 2)


@dataclass
class TrainConfig:
    variant: str = "mk"
    iterations: int = 2000
    grad_split_threshold: float = 0.0002
    opacity_reset_interval: int = 3000
    densify_until: int | None = None        # default: iterations // 2
    densify_interval: int = 100
    max_gaussians: int | None = None
    init_gaussians: int | None = None       # default: max_gaussians or 1000
    loss_ssim_weight: float = 0.2
    seed: int = 0
    # learning rates (position is scaled by scene extent and decays
    # exponentially to 1% of its initial value over the run)
    lr_position: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_variant: float = 2.5e-3
    # densification mechanics
    clone_scale_fraction: float = 0.01
    split_scale_shrink: float = 1.6
    prune_opacity: float = 0.005
    # appearance setup
    kernel_count: int = 4
    hidden: int = 4
    sh_degree: int = 3
    progressive_sh: bool = True
    sh_degree_interval: int = 1000
    base_opacity: float = 0.1
    eval_interval: int = 200

    def __post_init__(self):
        if not 0.0 < self.loss_ssim_weight < 1.0:
            raise ValueError("loss_ssim_weight must lie in (0, 1)")
        if self.grad_split_threshold <= 0 or self.iterations < 0:
            raise ValueError("thresholds must be positive")
        if self.densify_until is None:
            self.densify_until = self.iterations // 2


@dataclass
class AdamState:
    """First/second moments mirroring the scene arrays, plus step count."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def zeros_for(cls, scene):
        return cls({k: np.zeros_like(a) for k, a in scene.trainable_arrays().items()},
                   {k: np.zeros_like(a) for k, a in scene.trainable_arrays().items()})


# ---------------------------------------------------------------------------
# photometric loss
# ---------------------------------------------------------------------------

def _filter_same(img, kernel):
    """Separable 'same' correlation with zero padding (self-adjoint)."""
    r = kernel.size // 2
    padded = np.pad(img, r, mode="constant")
    tmp = np.zeros((padded.shape[0], img.shape[1]))
    for i, kv in enumerate(kernel):
        tmp += kv * padded[:, i:i + img.shape[1]]
    out = np.zeros(img.shape)
    for i, kv in enumerate(kernel):
        out += kv * tmp[i:i + img.shape[0], :]
    return out


def _ssim_value_grad(x, y):
    """Mean SSIM over all pixels/channels and its gradient w.r.t. x.

    Uses zero-padded 'same' filtering (the training-loss convention), which
    makes the convolution its own adjoint and keeps the gradient exact.
    """
    kernel = metrics.gaussian_window()
    n_total = x.size
    total = 0.0
    grad = np.zeros_like(x)
    for c in range(x.shape[2]):
        xc = x[..., c]
        yc = y[..., c]
        mu_x = _filter_same(xc, kernel)
        mu_y = _filter_same(yc, kernel)
        var_x = _filter_same(xc * xc, kernel) - mu_x * mu_x
        var_y = _filter_same(yc * yc, kernel) - mu_y * mu_y
        cov = _filter_same(xc * yc, kernel) - mu_x * mu_y
        a1 = 2.0 * mu_x * mu_y + metrics.SSIM_C1
        a2 = 2.0 * cov + metrics.SSIM_C2
        b1 = mu_x * mu_x + mu_y * mu_y + metrics.SSIM_C1
        b2 = var_x + var_y + metrics.SSIM_C2
        bb = b1 * b2
        s = (a1 * a2) / bb
        total += s.sum()
        g_mu = (2.0 * mu_y * a2 / bb - 2.0 * mu_x * s / b1) / n_total
        g_var = (-s / b2) / n_total
        g_cov = (2.0 * a1 / bb) / n_total
        grad[..., c] = (_filter_same(g_mu, kernel)
                        + 2.0 * xc * _filter_same(g_var, kernel)
                        - 2.0 * _filter_same(g_var * mu_x, kernel)
                        + yc * _filter_same(g_cov, kernel)
                        - _filter_same(g_cov * mu_y, kernel))
    return total / n_total, grad


def photometric_loss(rendered, target, w=0.2):
    """(1-w) L1 + w (1 - SSIM) with the exact gradient image.

    SSIM here uses the training convention: 11x11 Gaussian window, sigma 1.5,
    zero-padded, averaged over every pixel.
    """
    rendered = np.asarray(rendered, dtype=FLOAT)
    target = np.asarray(target, dtype=FLOAT)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    d_l1 = np.sign(diff) / diff.size
    if w == 0.0:
        return l1, d_l1
    msim, d_ssim = _ssim_value_grad(rendered, target)
    loss = (1.0 - w) * l1 + w * (1.0 - msim)
    grad = (1.0 - w) * d_l1 - w * d_ssim
    return loss, grad


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(scene, grads, state, lrs):
    """One bias-corrected Adam update over every parameter group.

    ``lrs`` maps group name (centers, quats, log_scales, sh, svf) to a
    learning rate.  Quaternions are renormalized, log-scales clamped to
    [-12, 6], and the bilinear rescale rate lambda_s floored afterwards.
    """
    params = scene.trainable_arrays()
    gradient = grads.arrays()
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = gradient[name]
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient in parameter group {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lrs[name] * (m / c1) / (np.sqrt(v / c2) + state.eps)

    scene.quats[:] = normalize_quats(scene.quats)
    np.clip(scene.log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX, out=scene.log_scales)
    if scene.variant == "bilinear":
        np.maximum(scene.svf[:, 16], LAMBDA_S_MIN, out=scene.svf[:, 16])
    return scene, state


def position_lr(config, iteration, extent):
    """Exponentially decaying position learning rate (to 1% of initial)."""
    frac = iteration / max(config.iterations, 1)
    return config.lr_position * extent * (0.01 ** frac)


def group_lrs(scene, config, iteration, extent):
    svf_lr = config.lr_opacity if scene.variant == "constant" else config.lr_variant
    return {"centers": position_lr(config, iteration, extent),
            "quats": config.lr_rotation,
            "log_scales": config.lr_scale,
            "sh": config.lr_sh,
            "svf": svf_lr}


# ---------------------------------------------------------------------------
# opacity probes, densification, resets
# ---------------------------------------------------------------------------

def svf_alpha_probe(scene, pts=PROBE_PTS):
    """Raw variant opacity at the probe points, shape (N, len(pts))."""
    u = pts[:, 0]
    v = pts[:, 1]
    if scene.variant == "constant":
        a = 1.0 / (1.0 + np.exp(-scene.svf[:, 0]))
        return np.repeat(a[:, None], pts.shape[0], axis=1)
    if scene.variant == "bilinear":
        lam = scene.svf[:, 16][:, None]
        up = 1.0 / (1.0 + np.exp(-lam * u[None, :]))
        vp = 1.0 / (1.0 + np.exp(-lam * v[None, :]))
        w = np.stack([(1 - up) * (1 - vp), (1 - up) * vp,
                      up * (1 - vp), up * vp], axis=2)
        return np.einsum("npc,nc->np", w, scene.svf[:, 12:16])
    if scene.variant in ("mk", "mk-sigmoid"):
        k = scene.k
        kc = scene.svf[:, :2 * k].reshape(-1, k, 2)
        d2 = ((pts[None, None, :, :] - kc[:, :, None, :]) ** 2).sum(-1)
        if scene.variant == "mk":
            f = np.exp(-scene.lambda_e * d2)
        else:
            f = 1.0 - np.tanh(d2)
        return np.einsum("nkp,nk->np", f, scene.svf[:, 5 * k:])
    # mlp
    h = scene.hidden
    o1, o2, o3, o4, o5 = 2 * h, 3 * h, 3 * h + h * h, 4 * h + h * h, 8 * h + h * h
    w1 = scene.svf[:, :o1].reshape(-1, h, 2)
    b1 = scene.svf[:, o1:o2]
    w2 = scene.svf[:, o2:o3].reshape(-1, h, h)
    b2 = scene.svf[:, o3:o4]
    w3a = scene.svf[:, o4:o5].reshape(-1, 4, h)[:, 3, :]
    b3a = scene.svf[:, -1]
    z1 = np.einsum("nhj,pj->nph", w1, pts) + b1[:, None, :]
    h1 = 1.0 / (1.0 + np.exp(-z1))
    z2 = np.einsum("nkh,nph->npk", w2, h1) + b2[:, None, :]
    h2 = 1.0 / (1.0 + np.exp(-z2))
    return np.einsum("nh,nph->np", w3a, h2) + b3a[:, None]


def effective_opacity(scene):
    """Per-surfel opacity used for pruning: peak probe-grid alpha (>= 0)."""
    return np.clip(svf_alpha_probe(scene), 0.0, None).max(axis=1)


def densify(scene, mean_grads, config, extent, rng, state=None):
    """Clone/split surfels with large positional gradients, prune faint ones.

    Surfels above the gradient threshold are cloned when small (largest scale
    below ``extent * clone_scale_fraction``) and otherwise split into two
    children with scales shrunk by 1.6 and centers sampled inside the parent
    footprint.  The surfel count never exceeds ``max_gaussians``: the
    highest-gradient candidates win, ties broken by index.
    """
    n = scene.n
    mean_grads = np.asarray(mean_grads, dtype=FLOAT).reshape(n)
    cap = config.max_gaussians if config.max_gaussians is not None else np.inf
    budget = int(min(cap - n, n)) if np.isfinite(cap) else n
    over = mean_grads > config.grad_split_threshold
    if budget > 0 and over.any():
        order = np.lexsort((np.arange(n), -mean_grads))
        chosen = order[over[order]][:budget]
        chosen = np.sort(chosen)
    else:
        chosen = np.empty(0, dtype=np.int64)

    scales = np.exp(scene.log_scales)
    split_mask = np.zeros(n, dtype=bool)
    new_parts = []
    shrink = np.log(config.split_scale_shrink)
    for i in chosen:
        if scales[i].max() <= extent * config.clone_scale_fraction:
            new_parts.append(scene.select(np.array([i])))
        else:
            split_mask[i] = True
            child = scene.select(np.array([i, i]))
            rot = quat_to_rot(scene.quats[i])
            xi = rng.normal(size=(2, 2))
            offs = (xi[:, 0:1] * scales[i, 0] * rot[:, 0]
                    + xi[:, 1:2] * scales[i, 1] * rot[:, 1])
            child.centers += offs
            child.log_scales -= shrink
            new_parts.append(child)

    keep = ~split_mask
    parts = [scene.select(np.flatnonzero(keep))] + new_parts
    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)
    keep_idx = np.flatnonzero(keep)

    # prune near-transparent surfels (children included)
    eff = effective_opacity(out)
    alive = eff >= config.prune_opacity
    if not alive.all():
        out = out.select(np.flatnonzero(alive))
    if state is not None:
        # moment rows: survivors of the original scene keep their state, all
        # appended children start fresh; pruning filters both
        kept_old = keep_idx[alive[:keep_idx.size]]
        n_fresh = out.n - kept_old.size
        for d in (state.m, state.v):
            for key, arr in d.items():
                fresh = np.zeros((n_fresh,) + arr.shape[1:], dtype=arr.dtype)
                d[key] = np.concatenate([arr[kept_old], fresh])
    return out, state


def reset_opacity(scene):
    """Clamp every surfel's opacity parameters down to the 0.01 floor.

    Constant: stored logit set so the activated opacity is min(current, 0.01).
    Bilinear / movable kernels: each learnable opacity clamped to 0.01.
    MLP: the opacity bias becomes min(mean probe-grid alpha, 0.01) and the
    last layer's opacity row is scaled by 0.1 (the paper gives no rule for
    spatially varying opacities; this mirrors the reset's purpose).
    """
    if scene.variant == "constant":
        cur = 1.0 / (1.0 + np.exp(-scene.svf[:, 0]))
        scene.svf[:, 0] = logit(np.minimum(cur, 0.01))
    elif scene.variant == "bilinear":
        np.minimum(scene.svf[:, 12:16], 0.01, out=scene.svf[:, 12:16])
    elif scene.variant in ("mk", "mk-sigmoid"):
        k = scene.k
        np.minimum(scene.svf[:, 5 * k:], 0.01, out=scene.svf[:, 5 * k:])
    else:
        mean_alpha = svf_alpha_probe(scene).mean(axis=1)
        h = scene.hidden
        o4 = 4 * h + h * h
        o5 = 8 * h + h * h
        w3 = scene.svf[:, o4:o5].reshape(-1, 4, h)
        w3[:, 3, :] *= 0.1
        scene.svf[:, o4:o5] = w3.reshape(scene.n, -1)
        scene.svf[:, -1] = np.minimum(mean_alpha, 0.01)
    return scene


def kernel_inside_fraction(scene, uv_cutoff=3.0):
    """Percentage of movable-kernel centers inside the Gaussian footprint."""
    if scene.variant not in ("mk", "mk-sigmoid"):
        raise ValueError(f"kernel_inside_fraction needs a movable-kernel scene, "
                         f"got variant {scene.variant!r}")
    k = scene.k
    centers = scene.svf[:, :2 * k].reshape(-1, k, 2)
    dist = np.linalg.norm(centers, axis=2)
    return float((dist <= uv_cutoff).mean() * 100.0)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def rig_extent(cameras):
    eyes = np.stack([c.origin for c in cameras])
    center = eyes.mean(axis=0)
    return max(float(np.max(np.linalg.norm(eyes - center, axis=1))), 1e-3)


def dataset_psnr(scene, dataset, render_config):
    vals = [metrics.psnr(render(scene, cam, render_config).color, img)
            for cam, img in zip(dataset.cameras, dataset.images)]
    return float(np.mean(vals))


def fit(dataset, config, scene=None):
    """Optimize a scene against the dataset's views.

    One random view per iteration (sampled without replacement per epoch),
    rendered forward and backward, followed by an Adam update; densification
    runs every ``densify_interval`` iterations until ``densify_until`` and
    opacities reset on their own schedule.  Deterministic for a fixed seed.

    Returns (scene, records) where each record carries iteration, loss, psnr,
    gaussian_count and wall_ms; the final record evaluates the whole dataset.
    """
    if len(dataset.cameras) == 0:
        raise ValueError("dataset has no views")
    rng = np.random.default_rng(config.seed)
    if scene is None:
        n_init = config.init_gaussians
        if n_init is None:
            n_init = config.max_gaussians if config.max_gaussians else 1000
        scene = seed_scene(config.variant, dataset.cameras, n_init,
                           seed=int(rng.integers(2 ** 31)),
                           base_opacity=config.base_opacity,
                           k=config.kernel_count, hidden=config.hidden,
                           sh_degree=config.sh_degree)
    rcfg = RenderConfig(background=dataset.background)
    extent = rig_extent(dataset.cameras)
    state = AdamState.zeros_for(scene)
    grad_accum = np.zeros(scene.n)
    denom = np.zeros(scene.n)
    records = []
    n_views = len(dataset.cameras)
    view_queue = []
    t0 = time.perf_counter()

    def log(iteration, loss):
        records.append({
            "iteration": iteration,
            "loss": float(loss),
            "psnr": dataset_psnr(scene, dataset, rcfg),
            "gaussian_count": scene.n,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        })

    for it in range(config.iterations):
        if config.progressive_sh:
            scene.active_sh_degree = min(it // config.sh_degree_interval,
                                         scene.sh_degree)
        else:
            scene.active_sh_degree = scene.sh_degree
        if not view_queue:
            view_queue = list(rng.permutation(n_views))
        view = int(view_queue.pop(0))
        out = render(scene, dataset.cameras[view], rcfg)
        loss, d_img = photometric_loss(out.color, dataset.images[view],
                                       config.loss_ssim_weight)
        grads = render_backward(scene, dataset.cameras[view], rcfg, d_img)
        if it % config.eval_interval == 0:
            log(it, loss)
        adam_step(scene, grads, state, group_lrs(scene, config, it, extent))

        visible = grads.n_contrib > 0
        grad_accum[visible] += grads.screen_grad[visible]
        denom[visible] += 1

        step = it + 1
        if step < config.densify_until:
            cap_ok = (config.max_gaussians is None
                      or scene.n < config.max_gaussians)
            if step % config.densify_interval == 0 and cap_ok:
                mean_g = grad_accum / np.maximum(denom, 1.0)
                scene, state = densify(scene, mean_g, config, extent, rng, state)
                grad_accum = np.zeros(scene.n)
                denom = np.zeros(scene.n)
            if step % config.opacity_reset_interval == 0:
                scene = reset_opacity(scene)

    final_losses = []
    for cam, img in zip(dataset.cameras, dataset.images):
        out = render(scene, cam, rcfg)
        final_losses.append(photometric_loss(out.color, img,
                                             config.loss_ssim_weight)[0])
    log(config.iterations, float(np.mean(final_losses)))
    return scene, records
