"""Central finite-difference verification of the analytic gradients.

Every backward path in the package (spatially varying functions, ray-surfel
intersection, and the full renderer) is compared against central differences
with step 1e-5 in float64.  Relative error uses a small magnitude floor so
that finite-difference roundoff noise on near-zero gradients does not register
as disagreement:

    rel_err = |analytic - fd| / max(|analytic|, |fd|, floor)

Renderer test scenes are rejection-sampled away from the discrete decision
boundaries of compositing (uv cutoff, alpha floor/ceiling, depth-sort ties,
termination), where one-sided derivatives make finite differences undefined.
"""

import numpy as np

from . import appearance as ap
from .geometry import Camera, SurfelGeometry, intersect, intersect_vjp
from .renderer import RenderConfig, render, render_backward
from .scene import make_scene

FD_STEP = 1e-5
SVF_TOL = 1e-5
RENDER_TOL = 1e-4


def _rel_err(a, f, floor):
    return abs(a - f) / max(abs(a), abs(f), floor)


def _params_from_row(variant, row, k, hidden, lambda_e):
    if variant == "constant":
        return ap.ConstantParams(float(row[0]))
    if variant == "bilinear":
        return ap.BilinearParams.from_row(row)
    if variant == "mk":
        return ap.MovableKernelParams.from_row(row, lambda_e, "exponential")
    if variant == "mk-sigmoid":
        return ap.MovableKernelParams.from_row(row, lambda_e, "sigmoid")
    if variant == "mlp":
        return ap.TinyMlpParams.from_row(row, hidden)
    raise ValueError(f"unknown appearance variant {variant!r}")


def _grads_to_row(variant, grads):
    if variant == "constant":
        return np.array([grads.opacity])
    return grads.to_row()


def _random_svf_row(variant, rng, k, hidden):
    if variant == "constant":
        return np.array([rng.normal(0.0, 2.0)])
    if variant == "bilinear":
        return np.concatenate([rng.normal(0.0, 0.5, 12),
                               rng.uniform(-0.5, 1.0, 4),
                               [rng.uniform(0.5, 8.0)]])
    if variant in ("mk", "mk-sigmoid"):
        return np.concatenate([rng.uniform(-1.5, 1.5, 2 * k),
                               rng.normal(0.0, 0.5, 3 * k),
                               rng.uniform(-0.5, 1.0, k)])
    return rng.uniform(-0.8, 0.8, ap.svf_width("mlp", hidden=hidden))


def check_svf(variant, seed=0, cases=200, step=FD_STEP, tol=SVF_TOL,
              k=ap.DEFAULT_KERNEL_COUNT, hidden=ap.DEFAULT_HIDDEN):
    """FD-verify svf_vjp for one variant over random parameters and points."""
    rng = np.random.default_rng(seed)
    floor = 1e-4
    worst = 0.0
    for _ in range(cases):
        row = _random_svf_row(variant, rng, k, hidden)
        lam_e = rng.uniform(0.02, 0.5) if variant in ("mk", "mk-sigmoid") else 0.0
        p = rng.uniform(-2.5, 2.5, 2)
        d_rgb = rng.normal(size=3)
        d_alpha = rng.normal()

        params = _params_from_row(variant, row, k, hidden, lam_e)
        d_p, d_params = ap.svf_vjp(p, params, d_rgb, d_alpha)
        grad_row = _grads_to_row(variant, d_params)

        def objective(pp, rr):
            rgb, a = ap.svf_eval(pp, _params_from_row(variant, rr, k, hidden, lam_e))
            return float(d_rgb @ rgb + d_alpha * a)

        for axis in range(2):
            pp = p.copy(); pp[axis] += step
            pm = p.copy(); pm[axis] -= step
            fd = (objective(pp, row) - objective(pm, row)) / (2 * step)
            worst = max(worst, _rel_err(d_p[axis], fd, floor))
        for j in range(row.size):
            rp = row.copy(); rp[j] += step
            rm = row.copy(); rm[j] -= step
            fd = (objective(p, rp) - objective(p, rm)) / (2 * step)
            worst = max(worst, _rel_err(grad_row[j], fd, floor))
    return {"suite": f"svf/{variant}", "cases": cases,
            "worst_rel_err": worst, "tol": tol, "passed": worst < tol}


def check_intersect(seed=0, cases=100, step=FD_STEP, tol=SVF_TOL):
    """FD-verify intersect_vjp over random non-degenerate configurations."""
    rng = np.random.default_rng(seed)
    floor = 1e-4
    worst = 0.0
    done = 0
    while done < cases:
        cam = _random_camera(rng, 16)
        px = (int(rng.integers(0, cam.width)), int(rng.integers(0, cam.height)))
        surfel = _random_surfel_near_ray(rng, cam, px)
        sample = intersect(cam, px, surfel)
        if sample is None or not _intersect_margins_ok(cam, px, surfel, sample):
            continue
        d_uv = rng.normal(size=2)
        d_w = rng.normal()
        d_c, d_q, d_s = intersect_vjp(cam, px, surfel, d_uv, d_w)

        def objective(center, quat, scale):
            s = intersect(cam, px, SurfelGeometry(center, quat, scale))
            assert s is not None, "perturbation crossed a rejection boundary"
            return float(d_uv @ s.uv + d_w * s.gaussian_weight)

        c0, q0, s0 = surfel.center, surfel.rotation, np.exp(surfel.log_scale)
        for j in range(3):
            cp = c0.copy(); cp[j] += step
            cm = c0.copy(); cm[j] -= step
            fd = (objective(cp, q0, s0) - objective(cm, q0, s0)) / (2 * step)
            worst = max(worst, _rel_err(d_c[j], fd, floor))
        for j in range(4):
            qp = q0.copy(); qp[j] += step
            qm = q0.copy(); qm[j] -= step
            fd = (objective(c0, qp, s0) - objective(c0, qm, s0)) / (2 * step)
            worst = max(worst, _rel_err(d_q[j], fd, floor))
        for j in range(2):
            sp = s0.copy(); sp[j] += step
            sm = s0.copy(); sm[j] -= step
            fd = (objective(c0, q0, sp) - objective(c0, q0, sm)) / (2 * step)
            worst = max(worst, _rel_err(d_s[j], fd, floor))
        done += 1
    return {"suite": "geometry/intersect", "cases": cases,
            "worst_rel_err": worst, "tol": tol, "passed": worst < tol}


def _random_camera(rng, size):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    from .geometry import quat_to_rot
    rot = quat_to_rot(q)
    origin = rng.normal(0.0, 1.0, 3)
    f = size * 1.2
    return Camera(size, size, f, f, size / 2.0, size / 2.0, rot, origin)


def _random_surfel_near_ray(rng, cam, pixel):
    _, d = cam.pixel_ray(pixel)
    z = rng.uniform(2.0, 6.0)
    center = cam.origin + z * d + rng.normal(0.0, 0.1, 3)
    quat = rng.normal(size=4)
    scale = np.exp(rng.uniform(np.log(0.3), np.log(1.2), 2))
    return SurfelGeometry(center, quat, scale)


def _intersect_margins_ok(cam, pixel, surfel, sample, cutoff=3.0):
    o, d = cam.pixel_ray(pixel)
    n = surfel.frame()[:, 2]
    if abs((d / np.linalg.norm(d)) @ n) < 0.05:
        return False
    if np.linalg.norm(sample.uv) > cutoff - 0.2:
        return False
    return sample.depth > 0.1


# ---------------------------------------------------------------------------
# full renderer check
# ---------------------------------------------------------------------------

def _random_render_scene(variant, rng, n, size, k, hidden):
    f = size * 1.2
    z = 2.5 + rng.permutation(n) * 0.9 + rng.uniform(0.0, 0.5, n)
    ang = rng.uniform(-0.25, 0.25, (n, 2))
    centers = np.column_stack([ang[:, 0] * z, ang[:, 1] * z, z])
    quats = rng.normal(size=(n, 4))
    scales = rng.uniform(0.4, 0.9, (n, 2)) * (z / f * size / 5.0)[:, None]
    scene = make_scene(variant, centers, quats, scales, k=k, hidden=hidden,
                       seed=int(rng.integers(2 ** 31)))
    scene.sh[:, 0, :] = rng.normal(0.0, 0.4, (n, 3))
    scene.sh[:, 1:, :] = rng.normal(0.0, 0.15, scene.sh[:, 1:, :].shape)
    for i in range(n):
        row = _random_svf_row(variant, rng, k, hidden)
        if variant == "constant":
            row[0] = rng.uniform(-1.5, 1.0)
        elif variant == "bilinear":
            row[12:16] = rng.uniform(0.1, 0.75, 4)
            row[16] = rng.uniform(2.0, 6.0)
        elif variant in ("mk", "mk-sigmoid"):
            row[: 2 * k] = rng.uniform(-1.0, 1.0, 2 * k)
            row[5 * k:] = rng.uniform(0.05, 0.2, k)
        else:
            row[-4:] = rng.uniform(0.1, 0.5, 4)
        scene.svf[i] = row
    cam = Camera(size, size, f, f, size / 2.0, size / 2.0, np.eye(3), np.zeros(3))
    return scene, cam


def _composite_margins_ok(scene, cam, config):
    """Reject scenes with samples near any discrete compositing boundary."""
    cutoff = config.uv_cutoff
    surfels = [scene.surfel(i) for i in range(scene.n)]
    apps = [scene.appearance(i) for i in range(scene.n)]
    any_hit = False
    for py in range(cam.height):
        for px in range(cam.width):
            hits = []
            for i in range(scene.n):
                wide = intersect(cam, (px, py), surfels[i], cutoff + 1.0)
                if wide is None:
                    o, d = cam.pixel_ray((px, py))
                    n = surfels[i].frame()[:, 2]
                    if abs((d / np.linalg.norm(d)) @ n) < 1e-6:
                        return False  # near-grazing
                    continue
                margin = abs(np.linalg.norm(wide.uv) - cutoff)
                if margin < 2e-2:
                    return False
                if np.linalg.norm(wide.uv) > cutoff:
                    continue
                hits.append((wide.depth, i, wide))
            hits.sort()
            for (d1, _, _), (d2, _, _) in zip(hits, hits[1:]):
                if d2 - d1 < 1e-3:
                    return False
            T = 1.0
            for _, i, s in hits:
                _, fa = ap.svf_eval(s.uv, apps[i].params)
                # only the MLP can cross the zero-opacity clamp; the kernel
                # forms are strictly positive and the generator keeps
                # bilinear corner opacities well above zero
                if scene.variant == "mlp" and abs(fa) < 2e-3:
                    return False
                a_raw = s.gaussian_weight * max(fa, 0.0)
                if abs(a_raw - config.alpha_ceiling) < 1e-3:
                    return False
                a_s = min(a_raw, config.alpha_ceiling)
                if abs(a_s - config.alpha_floor) < 1e-3:
                    return False
                if a_s < config.alpha_floor:
                    continue
                any_hit = True
                T *= 1.0 - a_s
                if T < 2.0 * config.transmittance_floor:
                    return False
    return any_hit


def render_case(variant, seed=0, n=3, size=8, k=ap.DEFAULT_KERNEL_COUNT,
                hidden=ap.DEFAULT_HIDDEN):
    """A random render configuration safe for finite differencing."""
    config = RenderConfig(background=np.array([0.2, 0.3, 0.4]),
                          alpha_floor=0.02)
    rng = np.random.default_rng(seed)
    for _ in range(200):
        scene, cam = _random_render_scene(variant, rng, n, size, k, hidden)
        if _composite_margins_ok(scene, cam, config):
            return scene, cam, config
    raise RuntimeError(f"no finite-difference-safe scene found for {variant}")


def check_renderer(variant, seed=0, n=3, size=8, step=FD_STEP, tol=RENDER_TOL,
                   k=ap.DEFAULT_KERNEL_COUNT, hidden=ap.DEFAULT_HIDDEN):
    """FD-verify render_backward over every trainable scalar of a scene."""
    scene, cam, config = render_case(variant, seed, n, size, k, hidden)
    rng = np.random.default_rng(seed + 91)
    d_color = rng.normal(size=(cam.height, cam.width, 3))
    grads = render_backward(scene, cam, config, d_color)
    analytic = grads.arrays()
    floor = 1e-3
    worst = 0.0
    n_checked = 0

    def objective():
        return float(np.sum(d_color * render(scene, cam, config).color))

    for name, arr in scene.trainable_arrays().items():
        flat = arr.reshape(-1)
        gflat = analytic[name].reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + step
            lp = objective()
            flat[j] = keep - step
            lm = objective()
            flat[j] = keep
            fd = (lp - lm) / (2 * step)
            worst = max(worst, _rel_err(gflat[j], fd, floor))
            n_checked += 1
    return {"suite": f"renderer/{variant}", "cases": n_checked,
            "worst_rel_err": worst, "tol": tol, "passed": worst < tol}


def run_suites(variant=None, seed=0, cases=200, full_renderer=False):
    """Run the FD suites; returns a list of per-suite report dicts."""
    variants = [variant] if variant else list(ap.VARIANT_TAGS)
    reports = []
    for v in variants:
        kk = 8 if v == "mk8" else ap.DEFAULT_KERNEL_COUNT
        vv = "mk" if v == "mk8" else v
        reports.append(check_svf(vv, seed=seed, cases=cases, k=kk))
    reports.append(check_intersect(seed=seed))
    if full_renderer:
        for v in variants:
            kk = 8 if v == "mk8" else ap.DEFAULT_KERNEL_COUNT
            vv = "mk" if v == "mk8" else v
            reports.append(check_renderer(vv, seed=seed, k=kk))
    return reports
