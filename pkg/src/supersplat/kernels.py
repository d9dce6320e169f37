"""Hot splatting kernels.

Everything here is written as plain scalar loops over preallocated numpy
arrays so it compiles under numba's ``@njit`` (see backend.py; the same code
runs uncompiled when SUPERSPLAT_NUMBA=0).  The public geometry/appearance
modules wrap the per-sample cores, so the math exists exactly once.

Scene arrays are structure-of-arrays, float64 throughout.  The spatially
varying parameters of surfel ``i`` live in one packed row ``svf[i]``:

    constant:  [opacity_raw]                                      (1)
    bilinear:  [c0 c1 c2 c3 (rgb each), a0..a3, lambda_s]         (17)
    kernels:   [K0x K0y .. , c0 .. (rgb each), a0..a_{k-1}]       (6k)
    mlp:       [W1 (Hx2), b1 (H), W2 (HxH), b2 (H), W3 (4xH), b3] (H^2+8H+4)

Gradients accumulate into per-candidate "instance" rows laid out as
[d_center(3), d_quat(4), d_logscale(2), d_rgb(3), d_svf(P)]; a tile owns a
contiguous slice of instance rows, which makes the threaded backward pass
race-free and the final merge order-deterministic.
"""

import math

import numpy as np

from .backend import njit

TAG_CONSTANT = 0
TAG_BILINEAR = 1
TAG_KERNELS = 2
TAG_KERNELS_SIGMOID = 3
TAG_MLP = 4

GEOM_COLS = 12  # d_center + d_quat + d_logscale + d_rgb prefix of a grad row

NEAR_PLANE = 1e-4
GRAZING_EPS = 1e-9


@njit
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


# ---------------------------------------------------------------------------
# ray-surfel intersection
# ---------------------------------------------------------------------------

@njit
def intersect_core(ox, oy, oz, dx, dy, dz, center, rot, su, sv,
                   cutoff_sq, near, grazing_eps):
    """Intersect one ray with one surfel plane.

    ``rot`` columns are (t_u, t_v, n); ``d`` is the un-normalized ray
    direction with camera-space z equal to 1, so the ray parameter t is the
    camera-space depth.  Returns (hit, u, v, depth, gaussian_weight).
    """
    nx = rot[0, 2]
    ny = rot[1, 2]
    nz = rot[2, 2]
    dn = dx * nx + dy * ny + dz * nz
    dnorm = math.sqrt(dx * dx + dy * dy + dz * dz)
    if abs(dn) < grazing_eps * dnorm:
        return False, 0.0, 0.0, 0.0, 0.0
    wx = center[0] - ox
    wy = center[1] - oy
    wz = center[2] - oz
    t = (wx * nx + wy * ny + wz * nz) / dn
    if t <= near:
        return False, 0.0, 0.0, 0.0, 0.0
    rx = ox + t * dx - center[0]
    ry = oy + t * dy - center[1]
    rz = oz + t * dz - center[2]
    u = (rx * rot[0, 0] + ry * rot[1, 0] + rz * rot[2, 0]) / su
    v = (rx * rot[0, 1] + ry * rot[1, 1] + rz * rot[2, 1]) / sv
    rr = u * u + v * v
    if rr > cutoff_sq:
        return False, 0.0, 0.0, 0.0, 0.0
    return True, u, v, t, math.exp(-0.5 * rr)


@njit
def intersect_vjp_core(ox, oy, oz, dx, dy, dz, center, rot, su, sv,
                       u, v, t, gu, gv, d_center, d_rot):
    """Accumulate d(loss)/d(center, rot columns) for one intersection.

    ``gu, gv`` are the cotangents on (u, v).  Adds into ``d_center`` (3,) and
    ``d_rot`` (3, 3); returns (d_su, d_sv) w.r.t. the linear scales.
    """
    tux, tuy, tuz = rot[0, 0], rot[1, 0], rot[2, 0]
    tvx, tvy, tvz = rot[0, 1], rot[1, 1], rot[2, 1]
    nx, ny, nz = rot[0, 2], rot[1, 2], rot[2, 2]

    B = dx * nx + dy * ny + dz * nz
    rx = ox + t * dx - center[0]
    ry = oy + t * dy - center[1]
    rz = oz + t * dz - center[2]
    gus = gu / su
    gvs = gv / sv
    grx = gus * tux + gvs * tvx
    gry = gus * tuy + gvs * tvy
    grz = gus * tuz + gvs * tvz
    gt = grx * dx + gry * dy + grz * dz
    gA = gt / B
    gB = -gt * t / B
    wx = center[0] - ox
    wy = center[1] - oy
    wz = center[2] - oz

    d_center[0] += -grx + gA * nx
    d_center[1] += -gry + gA * ny
    d_center[2] += -grz + gA * nz

    d_rot[0, 0] += gus * rx
    d_rot[1, 0] += gus * ry
    d_rot[2, 0] += gus * rz
    d_rot[0, 1] += gvs * rx
    d_rot[1, 1] += gvs * ry
    d_rot[2, 1] += gvs * rz
    d_rot[0, 2] += gA * wx + gB * dx
    d_rot[1, 2] += gA * wy + gB * dy
    d_rot[2, 2] += gA * wz + gB * dz

    return -gu * u / su, -gv * v / sv


@njit
def quat_vjp(q, d_rot, d_q):
    """Chain a rotation-matrix cotangent back to the raw quaternion.

    The forward pass builds the matrix from q normalized, so the
    normalization Jacobian is included here.  Adds into ``d_q`` (4,).
    """
    m = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    w = q[0] / m
    x = q[1] / m
    y = q[2] / m
    z = q[3] / m
    G00, G01, G02 = d_rot[0, 0], d_rot[0, 1], d_rot[0, 2]
    G10, G11, G12 = d_rot[1, 0], d_rot[1, 1], d_rot[1, 2]
    G20, G21, G22 = d_rot[2, 0], d_rot[2, 1], d_rot[2, 2]

    dw = 2.0 * (-G01 * z + G02 * y + G10 * z - G12 * x - G20 * y + G21 * x)
    dx = 2.0 * (G01 * y + G02 * z + G10 * y - 2.0 * G11 * x - G12 * w
                + G20 * z + G21 * w - 2.0 * G22 * x)
    dy = 2.0 * (-2.0 * G00 * y + G01 * x + G02 * w + G10 * x + G12 * z
                - G20 * w + G21 * z - 2.0 * G22 * y)
    dz = 2.0 * (-2.0 * G00 * z - G01 * w + G02 * x + G10 * w
                - 2.0 * G11 * z + G12 * y + G20 * x + G21 * y)

    dot = dw * w + dx * x + dy * y + dz * z
    d_q[0] += (dw - dot * w) / m
    d_q[1] += (dx - dot * x) / m
    d_q[2] += (dy - dot * y) / m
    d_q[3] += (dz - dot * z) / m


# ---------------------------------------------------------------------------
# spatially varying functions
# ---------------------------------------------------------------------------

@njit
def svf_eval_core(tag, row, kk, hh, lam_e, u, v, scratch):
    """Evaluate the variant's raw (delta_rgb, alpha) at p = (u, v).

    No clamping happens here; the constant variant reports its activated
    opacity with a zero color delta.
    """
    fr = 0.0
    fg = 0.0
    fb = 0.0
    fa = 0.0
    if tag == TAG_CONSTANT:
        fa = _sigmoid(row[0])
    elif tag == TAG_BILINEAR:
        lam = row[16]
        up = _sigmoid(lam * u)
        vp = _sigmoid(lam * v)
        w0 = (1.0 - up) * (1.0 - vp)
        w1 = (1.0 - up) * vp
        w2 = up * (1.0 - vp)
        w3 = up * vp
        fr = w0 * row[0] + w1 * row[3] + w2 * row[6] + w3 * row[9]
        fg = w0 * row[1] + w1 * row[4] + w2 * row[7] + w3 * row[10]
        fb = w0 * row[2] + w1 * row[5] + w2 * row[8] + w3 * row[11]
        fa = w0 * row[12] + w1 * row[13] + w2 * row[14] + w3 * row[15]
    elif tag == TAG_KERNELS or tag == TAG_KERNELS_SIGMOID:
        coff = 2 * kk
        aoff = 5 * kk
        for i in range(kk):
            du = u - row[2 * i]
            dv = v - row[2 * i + 1]
            d2 = du * du + dv * dv
            if tag == TAG_KERNELS:
                f = math.exp(-lam_e * d2)
            else:
                f = 1.0 - math.tanh(d2)
            fr += f * row[coff + 3 * i]
            fg += f * row[coff + 3 * i + 1]
            fb += f * row[coff + 3 * i + 2]
            fa += f * row[aoff + i]
    else:  # TAG_MLP
        b1 = 2 * hh
        w2 = 3 * hh
        b2 = w2 + hh * hh
        w3 = b2 + hh
        b3 = w3 + 4 * hh
        for j in range(hh):
            scratch[j] = _sigmoid(row[2 * j] * u + row[2 * j + 1] * v + row[b1 + j])
        for j in range(hh):
            z = row[b2 + j]
            for l in range(hh):
                z += row[w2 + j * hh + l] * scratch[l]
            scratch[hh + j] = _sigmoid(z)
        out0 = row[b3]
        out1 = row[b3 + 1]
        out2 = row[b3 + 2]
        out3 = row[b3 + 3]
        for l in range(hh):
            h = scratch[hh + l]
            out0 += row[w3 + l] * h
            out1 += row[w3 + hh + l] * h
            out2 += row[w3 + 2 * hh + l] * h
            out3 += row[w3 + 3 * hh + l] * h
        fr, fg, fb, fa = out0, out1, out2, out3
    return fr, fg, fb, fa


@njit
def svf_vjp_core(tag, row, kk, hh, lam_e, u, v, dfr, dfg, dfb, dfa,
                 grad, goff, scratch):
    """Backward of svf_eval_core.

    Adds parameter gradients into ``grad[goff:goff+P]`` and returns the
    cotangents (du, dv) on the intersection point.
    """
    du_out = 0.0
    dv_out = 0.0
    if tag == TAG_CONSTANT:
        s = _sigmoid(row[0])
        grad[goff] += dfa * s * (1.0 - s)
    elif tag == TAG_BILINEAR:
        lam = row[16]
        up = _sigmoid(lam * u)
        vp = _sigmoid(lam * v)
        w0 = (1.0 - up) * (1.0 - vp)
        w1 = (1.0 - up) * vp
        w2 = up * (1.0 - vp)
        w3 = up * vp
        grad[goff] += w0 * dfr
        grad[goff + 1] += w0 * dfg
        grad[goff + 2] += w0 * dfb
        grad[goff + 3] += w1 * dfr
        grad[goff + 4] += w1 * dfg
        grad[goff + 5] += w1 * dfb
        grad[goff + 6] += w2 * dfr
        grad[goff + 7] += w2 * dfg
        grad[goff + 8] += w2 * dfb
        grad[goff + 9] += w3 * dfr
        grad[goff + 10] += w3 * dfg
        grad[goff + 11] += w3 * dfb
        grad[goff + 12] += w0 * dfa
        grad[goff + 13] += w1 * dfa
        grad[goff + 14] += w2 * dfa
        grad[goff + 15] += w3 * dfa
        g0 = dfr * row[0] + dfg * row[1] + dfb * row[2] + dfa * row[12]
        g1 = dfr * row[3] + dfg * row[4] + dfb * row[5] + dfa * row[13]
        g2 = dfr * row[6] + dfg * row[7] + dfb * row[8] + dfa * row[14]
        g3 = dfr * row[9] + dfg * row[10] + dfb * row[11] + dfa * row[15]
        dup = -(1.0 - vp) * g0 - vp * g1 + (1.0 - vp) * g2 + vp * g3
        dvp = -(1.0 - up) * g0 + (1.0 - up) * g1 - up * g2 + up * g3
        sup = up * (1.0 - up)
        svp = vp * (1.0 - vp)
        du_out = dup * sup * lam
        dv_out = dvp * svp * lam
        grad[goff + 16] += dup * sup * u + dvp * svp * v
    elif tag == TAG_KERNELS or tag == TAG_KERNELS_SIGMOID:
        coff = 2 * kk
        aoff = 5 * kk
        for i in range(kk):
            dx = u - row[2 * i]
            dy = v - row[2 * i + 1]
            d2 = dx * dx + dy * dy
            if tag == TAG_KERNELS:
                f = math.exp(-lam_e * d2)
                dfd2 = -lam_e * f
            else:
                th = math.tanh(d2)
                f = 1.0 - th
                dfd2 = -(1.0 - th * th)
            cr = row[coff + 3 * i]
            cg = row[coff + 3 * i + 1]
            cb = row[coff + 3 * i + 2]
            ai = row[aoff + i]
            grad[goff + coff + 3 * i] += f * dfr
            grad[goff + coff + 3 * i + 1] += f * dfg
            grad[goff + coff + 3 * i + 2] += f * dfb
            grad[goff + aoff + i] += f * dfa
            gf = dfr * cr + dfg * cg + dfb * cb + dfa * ai
            gd2 = gf * dfd2
            du_out += gd2 * 2.0 * dx
            dv_out += gd2 * 2.0 * dy
            grad[goff + 2 * i] += -gd2 * 2.0 * dx
            grad[goff + 2 * i + 1] += -gd2 * 2.0 * dy
    else:  # TAG_MLP
        b1 = 2 * hh
        w2 = 3 * hh
        b2 = w2 + hh * hh
        w3 = b2 + hh
        b3 = w3 + 4 * hh
        for j in range(hh):
            scratch[j] = _sigmoid(row[2 * j] * u + row[2 * j + 1] * v + row[b1 + j])
        for j in range(hh):
            z = row[b2 + j]
            for l in range(hh):
                z += row[w2 + j * hh + l] * scratch[l]
            scratch[hh + j] = _sigmoid(z)
        grad[goff + b3] += dfr
        grad[goff + b3 + 1] += dfg
        grad[goff + b3 + 2] += dfb
        grad[goff + b3 + 3] += dfa
        for j in range(hh):
            h2 = scratch[hh + j]
            grad[goff + w3 + j] += dfr * h2
            grad[goff + w3 + hh + j] += dfg * h2
            grad[goff + w3 + 2 * hh + j] += dfb * h2
            grad[goff + w3 + 3 * hh + j] += dfa * h2
            dh2 = (dfr * row[w3 + j] + dfg * row[w3 + hh + j]
                   + dfb * row[w3 + 2 * hh + j] + dfa * row[w3 + 3 * hh + j])
            scratch[2 * hh + j] = dh2 * h2 * (1.0 - h2)
        for l in range(hh):
            dh1 = 0.0
            for j in range(hh):
                dz2 = scratch[2 * hh + j]
                grad[goff + w2 + j * hh + l] += dz2 * scratch[l]
                dh1 += dz2 * row[w2 + j * hh + l]
            scratch[3 * hh + l] = dh1 * scratch[l] * (1.0 - scratch[l])
        for j in range(hh):
            dz2 = scratch[2 * hh + j]
            grad[goff + b2 + j] += dz2
        for j in range(hh):
            dz1 = scratch[3 * hh + j]
            grad[goff + 2 * j] += dz1 * u
            grad[goff + 2 * j + 1] += dz1 * v
            grad[goff + b1 + j] += dz1
            du_out += dz1 * row[2 * j]
            dv_out += dz1 * row[2 * j + 1]
    return du_out, dv_out


# ---------------------------------------------------------------------------
# tile binning
# ---------------------------------------------------------------------------

@njit
def bin_count(rects, valid, ntx, counts):
    for i in range(rects.shape[0]):
        if not valid[i]:
            continue
        for ty in range(rects[i, 2], rects[i, 3] + 1):
            for tx in range(rects[i, 0], rects[i, 1] + 1):
                counts[ty * ntx + tx] += 1


@njit
def bin_fill(rects, valid, ntx, offsets, cursor, items):
    for i in range(rects.shape[0]):
        if not valid[i]:
            continue
        for ty in range(rects[i, 2], rects[i, 3] + 1):
            for tx in range(rects[i, 0], rects[i, 1] + 1):
                t = ty * ntx + tx
                items[offsets[t] + cursor[t]] = i
                cursor[t] += 1


# ---------------------------------------------------------------------------
# forward / backward tile passes
# ---------------------------------------------------------------------------

@njit
def forward_range(tile_lo, tile_hi, ntx, tile_size, height, width,
                  cam_o, cam_rot, fx, fy, cx, cy,
                  centers, rots, scales, base_rgb, svf,
                  tag, kk, hh, lam_e,
                  offsets, items, max_cand,
                  cutoff_sq, alpha_floor, alpha_ceil, t_floor, signed_alpha,
                  bg, color, alpha_img, count_img):
    hu = np.empty(max_cand)
    hv = np.empty(max_cand)
    hw = np.empty(max_cand)
    ht = np.empty(max_cand)
    hidx = np.empty(max_cand, dtype=np.int64)
    scratch = np.empty(4 * hh if hh > 0 else 1)
    for tidx in range(tile_lo, tile_hi):
        ty = tidx // ntx
        tx = tidx % ntx
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        o0 = offsets[tidx]
        o1 = offsets[tidx + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                dcx = (px + 0.5 - cx) / fx
                dcy = (py + 0.5 - cy) / fy
                dx = cam_rot[0, 0] * dcx + cam_rot[0, 1] * dcy + cam_rot[0, 2]
                dy = cam_rot[1, 0] * dcx + cam_rot[1, 1] * dcy + cam_rot[1, 2]
                dz = cam_rot[2, 0] * dcx + cam_rot[2, 1] * dcy + cam_rot[2, 2]
                nh = 0
                for s in range(o0, o1):
                    i = items[s]
                    hit, u, v, t, w = intersect_core(
                        cam_o[0], cam_o[1], cam_o[2], dx, dy, dz,
                        centers[i], rots[i], scales[i, 0], scales[i, 1],
                        cutoff_sq, NEAR_PLANE, GRAZING_EPS)
                    if hit:
                        hu[nh] = u
                        hv[nh] = v
                        hw[nh] = w
                        ht[nh] = t
                        hidx[nh] = i
                        nh += 1
                # insertion sort by (depth, surfel index)
                for a in range(1, nh):
                    tu_ = hu[a]
                    tv_ = hv[a]
                    tw_ = hw[a]
                    tt_ = ht[a]
                    ti_ = hidx[a]
                    b = a - 1
                    while b >= 0 and (ht[b] > tt_ or (ht[b] == tt_ and hidx[b] > ti_)):
                        hu[b + 1] = hu[b]
                        hv[b + 1] = hv[b]
                        hw[b + 1] = hw[b]
                        ht[b + 1] = ht[b]
                        hidx[b + 1] = hidx[b]
                        b -= 1
                    hu[b + 1] = tu_
                    hv[b + 1] = tv_
                    hw[b + 1] = tw_
                    ht[b + 1] = tt_
                    hidx[b + 1] = ti_
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                cnt = 0
                for j in range(nh):
                    i = hidx[j]
                    fr, fg, fb, fa = svf_eval_core(
                        tag, svf[i], kk, hh, lam_e, hu[j], hv[j], scratch)
                    if tag != TAG_CONSTANT and not signed_alpha and fa < 0.0:
                        fa = 0.0
                    a_s = hw[j] * fa
                    if a_s > alpha_ceil:
                        a_s = alpha_ceil
                    if signed_alpha:
                        if abs(a_s) < alpha_floor:
                            continue
                    elif a_s < alpha_floor:
                        continue
                    wgt = T * a_s
                    cr += wgt * (base_rgb[i, 0] + fr)
                    cg += wgt * (base_rgb[i, 1] + fg)
                    cb += wgt * (base_rgb[i, 2] + fb)
                    T *= 1.0 - a_s
                    cnt += 1
                    if T < t_floor:
                        break
                color[py, px, 0] = cr + T * bg[0]
                color[py, px, 1] = cg + T * bg[1]
                color[py, px, 2] = cb + T * bg[2]
                alpha_img[py, px] = 1.0 - T
                count_img[py, px] = cnt


@njit
def backward_range(tile_lo, tile_hi, ntx, tile_size, height, width,
                   cam_o, cam_rot, fx, fy, cx, cy,
                   centers, quats, rots, scales, base_rgb, svf,
                   tag, kk, hh, lam_e,
                   offsets, items, max_cand,
                   cutoff_sq, alpha_floor, alpha_ceil, t_floor, signed_alpha,
                   bg, d_color, inst_grad, inst_contrib):
    hu = np.empty(max_cand)
    hv = np.empty(max_cand)
    hw = np.empty(max_cand)
    ht = np.empty(max_cand)
    hidx = np.empty(max_cand, dtype=np.int64)
    hslot = np.empty(max_cand, dtype=np.int64)
    ku = np.empty(max_cand)
    kv = np.empty(max_cand)
    kw = np.empty(max_cand)
    kt = np.empty(max_cand)
    kfa = np.empty(max_cand)
    kfa_raw = np.empty(max_cand)
    kalpha = np.empty(max_cand)
    ktb = np.empty(max_cand)
    krgb = np.empty((max_cand, 3))
    kidx = np.empty(max_cand, dtype=np.int64)
    kslot = np.empty(max_cand, dtype=np.int64)
    d_rot = np.empty((3, 3))
    scratch = np.empty(4 * hh if hh > 0 else 1)
    for tidx in range(tile_lo, tile_hi):
        ty = tidx // ntx
        tx = tidx % ntx
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        o0 = offsets[tidx]
        o1 = offsets[tidx + 1]
        if o0 == o1:
            continue
        for py in range(y0, y1):
            for px in range(x0, x1):
                dcx = (px + 0.5 - cx) / fx
                dcy = (py + 0.5 - cy) / fy
                dx = cam_rot[0, 0] * dcx + cam_rot[0, 1] * dcy + cam_rot[0, 2]
                dy = cam_rot[1, 0] * dcx + cam_rot[1, 1] * dcy + cam_rot[1, 2]
                dz = cam_rot[2, 0] * dcx + cam_rot[2, 1] * dcy + cam_rot[2, 2]
                nh = 0
                for s in range(o0, o1):
                    i = items[s]
                    hit, u, v, t, w = intersect_core(
                        cam_o[0], cam_o[1], cam_o[2], dx, dy, dz,
                        centers[i], rots[i], scales[i, 0], scales[i, 1],
                        cutoff_sq, NEAR_PLANE, GRAZING_EPS)
                    if hit:
                        hu[nh] = u
                        hv[nh] = v
                        hw[nh] = w
                        ht[nh] = t
                        hidx[nh] = i
                        hslot[nh] = s
                        nh += 1
                for a in range(1, nh):
                    tu_ = hu[a]
                    tv_ = hv[a]
                    tw_ = hw[a]
                    tt_ = ht[a]
                    ti_ = hidx[a]
                    ts_ = hslot[a]
                    b = a - 1
                    while b >= 0 and (ht[b] > tt_ or (ht[b] == tt_ and hidx[b] > ti_)):
                        hu[b + 1] = hu[b]
                        hv[b + 1] = hv[b]
                        hw[b + 1] = hw[b]
                        ht[b + 1] = ht[b]
                        hidx[b + 1] = hidx[b]
                        hslot[b + 1] = hslot[b]
                        b -= 1
                    hu[b + 1] = tu_
                    hv[b + 1] = tv_
                    hw[b + 1] = tw_
                    ht[b + 1] = tt_
                    hidx[b + 1] = ti_
                    hslot[b + 1] = ts_
                # forward replay, keeping composited samples
                T = 1.0
                cnt = 0
                for j in range(nh):
                    i = hidx[j]
                    fr, fg, fb, fa = svf_eval_core(
                        tag, svf[i], kk, hh, lam_e, hu[j], hv[j], scratch)
                    fa_eff = fa
                    if tag != TAG_CONSTANT and not signed_alpha and fa_eff < 0.0:
                        fa_eff = 0.0
                    a_raw = hw[j] * fa_eff
                    a_s = a_raw
                    if a_s > alpha_ceil:
                        a_s = alpha_ceil
                    if signed_alpha:
                        if abs(a_s) < alpha_floor:
                            continue
                    elif a_s < alpha_floor:
                        continue
                    ku[cnt] = hu[j]
                    kv[cnt] = hv[j]
                    kw[cnt] = hw[j]
                    kt[cnt] = ht[j]
                    kfa[cnt] = fa
                    kfa_raw[cnt] = a_raw
                    kalpha[cnt] = a_s
                    ktb[cnt] = T
                    krgb[cnt, 0] = base_rgb[i, 0] + fr
                    krgb[cnt, 1] = base_rgb[i, 1] + fg
                    krgb[cnt, 2] = base_rgb[i, 2] + fb
                    kidx[cnt] = i
                    kslot[cnt] = hslot[j]
                    cnt += 1
                    T *= 1.0 - a_s
                    if T < t_floor:
                        break
                if cnt == 0:
                    continue
                dLr = d_color[py, px, 0]
                dLg = d_color[py, px, 1]
                dLb = d_color[py, px, 2]
                if dLr == 0.0 and dLg == 0.0 and dLb == 0.0:
                    for j in range(cnt):
                        inst_contrib[kslot[j]] += 1
                    continue
                Sr = T * bg[0]
                Sg = T * bg[1]
                Sb = T * bg[2]
                for j in range(cnt - 1, -1, -1):
                    i = kidx[j]
                    slot = kslot[j]
                    inst_contrib[slot] += 1
                    grow = inst_grad[slot]
                    Ti = ktb[j]
                    a_s = kalpha[j]
                    u = ku[j]
                    v = kv[j]
                    w = kw[j]
                    ta = Ti * a_s
                    drr = dLr * ta
                    drg = dLg * ta
                    drb = dLb * ta
                    om = 1.0 - a_s
                    dalpha = (dLr * (Ti * krgb[j, 0] - Sr / om)
                              + dLg * (Ti * krgb[j, 1] - Sg / om)
                              + dLb * (Ti * krgb[j, 2] - Sb / om))
                    Sr += ta * krgb[j, 0]
                    Sg += ta * krgb[j, 1]
                    Sb += ta * krgb[j, 2]
                    grow[9] += drr
                    grow[10] += drg
                    grow[11] += drb
                    if kfa_raw[j] > alpha_ceil:
                        dalpha = 0.0
                    fa_eff = kfa[j]
                    if tag != TAG_CONSTANT and not signed_alpha and fa_eff < 0.0:
                        fa_eff = 0.0
                    dweight = dalpha * fa_eff
                    dfa = dalpha * w
                    if tag != TAG_CONSTANT and not signed_alpha and kfa[j] < 0.0:
                        dfa = 0.0
                    du, dv = svf_vjp_core(tag, svf[i], kk, hh, lam_e, u, v,
                                          drr, drg, drb, dfa,
                                          grow, GEOM_COLS, scratch)
                    du += dweight * (-u * w)
                    dv += dweight * (-v * w)
                    for r0 in range(3):
                        d_rot[r0, 0] = 0.0
                        d_rot[r0, 1] = 0.0
                        d_rot[r0, 2] = 0.0
                    dsu, dsv = intersect_vjp_core(
                        cam_o[0], cam_o[1], cam_o[2], dx, dy, dz,
                        centers[i], rots[i], scales[i, 0], scales[i, 1],
                        u, v, kt[j], du, dv,
                        grow[0:3], d_rot)
                    quat_vjp(quats[i], d_rot, grow[3:7])
                    grow[7] += dsu * scales[i, 0]
                    grow[8] += dsv * scales[i, 1]
