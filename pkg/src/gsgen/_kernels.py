"""Compiled per-Gaussian and per-tile kernels.

Every kernel writes only to slots owned by its own Gaussian, tile or entry, so
running tile ranges on different threads cannot change a single bit of output.
Accumulators are float64 regardless of the storage dtype.
"""
import math

import numba as nb
import numpy as np

_jit = nb.njit(cache=True, nogil=True, fastmath=False)

# layout of the per-entry gradient rows produced by the backward tile kernel
E_MX, E_MY, E_CA, E_CB, E_CC, E_OP, E_R, E_G, E_B, E_Z = range(10)
ENTRY_WIDTH = 10


@_jit
def _rotmat(qw, qx, qy, qz, r):
    r[0, 0] = 1.0 - 2.0 * (qy * qy + qz * qz)
    r[0, 1] = 2.0 * (qx * qy - qw * qz)
    r[0, 2] = 2.0 * (qx * qz + qw * qy)
    r[1, 0] = 2.0 * (qx * qy + qw * qz)
    r[1, 1] = 1.0 - 2.0 * (qx * qx + qz * qz)
    r[1, 2] = 2.0 * (qy * qz - qw * qx)
    r[2, 0] = 2.0 * (qx * qz - qw * qy)
    r[2, 1] = 2.0 * (qy * qz + qw * qx)
    r[2, 2] = 1.0 - 2.0 * (qx * qx + qy * qy)


@_jit
def _view_cov(i, scales, quats, rot_cv, m):
    """M = W R S^2 R^T W^T for Gaussian i, written into m (3x3)."""
    r = np.empty((3, 3))
    _rotmat(quats[i, 0], quats[i, 1], quats[i, 2], quats[i, 3], r)
    a = np.empty((3, 3))  # W R S
    for row in range(3):
        for col in range(3):
            acc = 0.0
            for k in range(3):
                acc += rot_cv[row, k] * r[k, col]
            a[row, col] = acc * scales[i, col]
    for row in range(3):
        for col in range(3):
            acc = 0.0
            for k in range(3):
                acc += a[row, k] * a[col, k]
            m[row, col] = acc


@_jit
def project_kernel(positions, scales, quats, rot_cv, t_cv, focal, cx, cy, near,
                   dilation, cutoff, width, height, tile,
                   mean2d, conic, depth, radius, rect, cov2d):
    n = positions.shape[0]
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    m = np.empty((3, 3))
    for i in range(n):
        x = rot_cv[0, 0] * positions[i, 0] + rot_cv[0, 1] * positions[i, 1] + rot_cv[0, 2] * positions[i, 2] + t_cv[0]
        y = rot_cv[1, 0] * positions[i, 0] + rot_cv[1, 1] * positions[i, 1] + rot_cv[1, 2] * positions[i, 2] + t_cv[1]
        z = rot_cv[2, 0] * positions[i, 0] + rot_cv[2, 1] * positions[i, 1] + rot_cv[2, 2] * positions[i, 2] + t_cv[2]
        depth[i] = z
        rect[i, 0] = 0
        rect[i, 1] = 0
        rect[i, 2] = 0
        rect[i, 3] = 0
        radius[i] = 0.0
        if z <= near:
            continue
        _view_cov(i, scales, quats, rot_cv, m)
        j00 = focal / z
        j02 = -focal * x / (z * z)
        j11 = focal / z
        j12 = -focal * y / (z * z)
        # sigma' = J M J^T with J = [[j00, 0, j02], [0, j11, j12]]
        s00 = j00 * (j00 * m[0, 0] + j02 * m[2, 0]) + j02 * (j00 * m[0, 2] + j02 * m[2, 2]) + dilation
        s01 = j00 * (j11 * m[0, 1] + j12 * m[0, 2]) + j02 * (j11 * m[2, 1] + j12 * m[2, 2])
        s11 = j11 * (j11 * m[1, 1] + j12 * m[2, 1]) + j12 * (j11 * m[1, 2] + j12 * m[2, 2]) + dilation
        det = s00 * s11 - s01 * s01
        if not det > 0.0:
            continue
        u = cx + focal * x / z
        v = cy + focal * y / z
        mean2d[i, 0] = u
        mean2d[i, 1] = v
        conic[i, 0] = s11 / det
        conic[i, 1] = -s01 / det
        conic[i, 2] = s00 / det
        cov2d[i, 0] = s00
        cov2d[i, 1] = s01
        cov2d[i, 2] = s11
        if cutoff <= 0.0:
            radius[i] = math.inf
            rect[i, 2] = ntx
            rect[i, 3] = nty
            continue
        half = 0.5 * (s00 - s11)
        lam = 0.5 * (s00 + s11) + math.sqrt(half * half + s01 * s01)
        r = cutoff * math.sqrt(lam)
        x0 = max(math.ceil(u - r), 0.0)
        x1 = min(math.floor(u + r), width - 1.0)
        y0 = max(math.ceil(v - r), 0.0)
        y1 = min(math.floor(v + r), height - 1.0)
        if x0 > x1 or y0 > y1:
            continue
        radius[i] = r
        rect[i, 0] = int(x0) // tile
        rect[i, 1] = int(y0) // tile
        rect[i, 2] = int(x1) // tile + 1
        rect[i, 3] = int(y1) // tile + 1


@_jit
def fill_entries(rect, offsets, ntx, entry_gauss, entry_tile):
    n = rect.shape[0]
    for i in range(n):
        k = offsets[i]
        for ty in range(rect[i, 1], rect[i, 3]):
            for tx in range(rect[i, 0], rect[i, 2]):
                entry_gauss[k] = i
                entry_tile[k] = ty * ntx + tx
                k += 1


@_jit
def composite_tiles(t0, t1, tile, width, height, ranges, entry_gauss,
                    mean2d, conic, depth, colors, opac,
                    alpha_max, alpha_skip, t_min, cutoff_sq,
                    out_rgb, out_t, out_d, out_m2, out_stop):
    ntx = (width + tile - 1) // tile
    for tid in range(t0, t1):
        tx = tid % ntx
        ty = tid // ntx
        start = ranges[tid, 0]
        end = ranges[tid, 1]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                trans = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                dacc = 0.0
                m2 = 0.0
                stop = end
                for e in range(start, end):
                    g = entry_gauss[e]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if cutoff_sq > 0.0 and q > cutoff_sq:
                        continue
                    alpha = opac[g] * math.exp(-0.5 * q)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha < alpha_skip:
                        continue
                    w = alpha * trans
                    z = depth[g]
                    cr += w * colors[g, 0]
                    cg += w * colors[g, 1]
                    cb += w * colors[g, 2]
                    dacc += w * z
                    m2 += w * z * z
                    trans *= 1.0 - alpha
                    if trans < t_min:
                        stop = e + 1
                        break
                out_rgb[py, px, 0] = cr
                out_rgb[py, px, 1] = cg
                out_rgb[py, px, 2] = cb
                out_t[py, px] = trans
                out_d[py, px] = dacc
                out_m2[py, px] = m2
                out_stop[py, px] = stop


@_jit
def backward_tiles(t0, t1, tile, width, height, ranges, entry_gauss,
                   mean2d, conic, depth, colors, opac,
                   alpha_max, alpha_skip, cutoff_sq,
                   stop_idx, final_rgb, final_a, final_d, final_m2,
                   g_rgb, g_a, g_d, g_m2, entry_grads):
    """Front-to-back pass: running transmittance plus suffix sums S_i = F - prefix_i."""
    ntx = (width + tile - 1) // tile
    for tid in range(t0, t1):
        tx = tid % ntx
        ty = tid // ntx
        start = ranges[tid, 0]
        for e in range(start, ranges[tid, 1]):
            for c in range(entry_grads.shape[1]):
                entry_grads[e, c] = 0.0
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                gr = g_rgb[py, px, 0]
                gg = g_rgb[py, px, 1]
                gb = g_rgb[py, px, 2]
                ga = g_a[py, px]
                gd = g_d[py, px]
                gm = g_m2[py, px]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and ga == 0.0 and gd == 0.0 and gm == 0.0:
                    continue
                fr = final_rgb[py, px, 0]
                fg = final_rgb[py, px, 1]
                fb = final_rgb[py, px, 2]
                fa = final_a[py, px]
                fd = final_d[py, px]
                fm = final_m2[py, px]
                pr = 0.0
                pg = 0.0
                pb = 0.0
                pa = 0.0
                pd = 0.0
                pm = 0.0
                trans = 1.0
                for e in range(start, stop_idx[py, px]):
                    g = entry_gauss[e]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    ca = conic[g, 0]
                    cb_ = conic[g, 1]
                    cc = conic[g, 2]
                    q = ca * dx * dx + 2.0 * cb_ * dx * dy + cc * dy * dy
                    if cutoff_sq > 0.0 and q > cutoff_sq:
                        continue
                    gauss = math.exp(-0.5 * q)
                    alpha = opac[g] * gauss
                    clamped = alpha > alpha_max
                    if clamped:
                        alpha = alpha_max
                    if alpha < alpha_skip:
                        continue
                    w = alpha * trans
                    z = depth[g]
                    c0 = colors[g, 0]
                    c1 = colors[g, 1]
                    c2 = colors[g, 2]
                    pr += w * c0
                    pg += w * c1
                    pb += w * c2
                    pa += w
                    pd += w * z
                    pm += w * z * z
                    inv = 1.0 / (1.0 - alpha)
                    dl_dalpha = (gr * (trans * c0 - (fr - pr) * inv)
                                 + gg * (trans * c1 - (fg - pg) * inv)
                                 + gb * (trans * c2 - (fb - pb) * inv)
                                 + ga * (trans - (fa - pa) * inv)
                                 + gd * (trans * z - (fd - pd) * inv)
                                 + gm * (trans * z * z - (fm - pm) * inv))
                    entry_grads[e, E_R] += gr * w
                    entry_grads[e, E_G] += gg * w
                    entry_grads[e, E_B] += gb * w
                    entry_grads[e, E_Z] += w * (gd + 2.0 * z * gm)
                    if not clamped:
                        entry_grads[e, E_OP] += dl_dalpha * gauss
                        dq = -0.5 * alpha * dl_dalpha
                        entry_grads[e, E_MX] += -2.0 * dq * (ca * dx + cb_ * dy)
                        entry_grads[e, E_MY] += -2.0 * dq * (cb_ * dx + cc * dy)
                        entry_grads[e, E_CA] += dq * dx * dx
                        entry_grads[e, E_CB] += dq * 2.0 * dx * dy
                        entry_grads[e, E_CC] += dq * dy * dy
                    trans *= 1.0 - alpha


@_jit
def reduce_entries(entry_gauss, entry_grads, out):
    """Serial sum of per-entry rows into per-Gaussian rows, in entry order."""
    for e in range(entry_gauss.shape[0]):
        g = entry_gauss[e]
        for c in range(entry_grads.shape[1]):
            out[g, c] += entry_grads[e, c]


@_jit
def _drot_dq(qw, qx, qy, qz, d, out):
    """Contract dL/dR (3x3) with dR/dq for q = (w, x, y, z)."""
    out[0] = 2.0 * (-qz * d[0, 1] + qy * d[0, 2] + qz * d[1, 0] - qx * d[1, 2] - qy * d[2, 0] + qx * d[2, 1])
    out[1] = 2.0 * (qy * d[0, 1] + qz * d[0, 2] + qy * d[1, 0] - 2.0 * qx * d[1, 1] - qw * d[1, 2]
                    + qz * d[2, 0] + qw * d[2, 1] - 2.0 * qx * d[2, 2])
    out[2] = 2.0 * (-2.0 * qy * d[0, 0] + qx * d[0, 1] + qw * d[0, 2] + qx * d[1, 0] + qz * d[1, 2]
                    - qw * d[2, 0] + qz * d[2, 1] - 2.0 * qy * d[2, 2])
    out[3] = 2.0 * (-2.0 * qz * d[0, 0] - qw * d[0, 1] + qx * d[0, 2] + qw * d[1, 0] - 2.0 * qz * d[1, 1]
                    + qy * d[1, 2] + qx * d[2, 0] + qy * d[2, 1])


@_jit
def project_backward_kernel(positions, scales, quats, raw_quats, rot_cv, t_cv, focal, dilation,
                            radius, g2d,
                            d_pos, d_logscale, d_quat):
    """Chain per-Gaussian screen-space grads (mean2d, conic, depth) to 3D parameters."""
    n = positions.shape[0]
    r = np.empty((3, 3))
    m = np.empty((3, 3))
    dm = np.empty((3, 3))
    dsig = np.empty((3, 3))
    drot = np.empty((3, 3))
    dq = np.empty(4)
    for i in range(n):
        for k in range(3):
            d_pos[i, k] = 0.0
            d_logscale[i, k] = 0.0
        for k in range(4):
            d_quat[i, k] = 0.0
        if radius[i] == 0.0:
            continue
        px = positions[i, 0]
        py = positions[i, 1]
        pz = positions[i, 2]
        x = rot_cv[0, 0] * px + rot_cv[0, 1] * py + rot_cv[0, 2] * pz + t_cv[0]
        y = rot_cv[1, 0] * px + rot_cv[1, 1] * py + rot_cv[1, 2] * pz + t_cv[1]
        z = rot_cv[2, 0] * px + rot_cv[2, 1] * py + rot_cv[2, 2] * pz + t_cv[2]
        _view_cov(i, scales, quats, rot_cv, m)
        f = focal
        j00 = f / z
        j02 = -f * x / (z * z)
        j11 = f / z
        j12 = -f * y / (z * z)
        jm = np.zeros((2, 3))
        for c in range(3):
            jm[0, c] = j00 * m[0, c] + j02 * m[2, c]
            jm[1, c] = j11 * m[1, c] + j12 * m[2, c]
        s00 = jm[0, 0] * j00 + jm[0, 2] * j02 + dilation
        s01 = jm[0, 1] * j11 + jm[0, 2] * j12
        s11 = jm[1, 1] * j11 + jm[1, 2] * j12 + dilation
        det = s00 * s11 - s01 * s01
        ia = s11 / det
        ib = -s01 / det
        ic = s00 / det
        # dL/dConic as a symmetric matrix, then dSigma' = -Conic G Conic
        ga = g2d[i, 2]
        gb = 0.5 * g2d[i, 3]
        gc = g2d[i, 4]
        t00 = ia * ga + ib * gb
        t01 = ia * gb + ib * gc
        t10 = ib * ga + ic * gb
        t11 = ib * gb + ic * gc
        ds00 = -(t00 * ia + t01 * ib)
        ds01 = -(t00 * ib + t01 * ic)
        ds11 = -(t10 * ib + t11 * ic)
        # dJ = 2 dSigma' J M
        dj00 = 2.0 * (ds00 * jm[0, 0] + ds01 * jm[1, 0])
        dj02 = 2.0 * (ds00 * jm[0, 2] + ds01 * jm[1, 2])
        dj11 = 2.0 * (ds01 * jm[0, 1] + ds11 * jm[1, 1])
        dj12 = 2.0 * (ds01 * jm[0, 2] + ds11 * jm[1, 2])
        gu = g2d[i, 0]
        gv = g2d[i, 1]
        zz = z * z
        dx = gu * f / z - dj02 * f / zz
        dy = gv * f / z - dj12 * f / zz
        dz = (-gu * f * x / zz - gv * f * y / zz + g2d[i, 5]
              - (dj00 + dj11) * f / zz + dj02 * 2.0 * f * x / (zz * z) + dj12 * 2.0 * f * y / (zz * z))
        for k in range(3):
            d_pos[i, k] = rot_cv[0, k] * dx + rot_cv[1, k] * dy + rot_cv[2, k] * dz
        # dM = J^T dSigma' J (J has zeros at [0,1] and [1,0])
        jmat = np.zeros((2, 3))
        jmat[0, 0] = j00
        jmat[0, 2] = j02
        jmat[1, 1] = j11
        jmat[1, 2] = j12
        for a in range(3):
            for b in range(3):
                dm[a, b] = (jmat[0, a] * (ds00 * jmat[0, b] + ds01 * jmat[1, b])
                            + jmat[1, a] * (ds01 * jmat[0, b] + ds11 * jmat[1, b]))
        # dSigma = W^T dM W
        for a in range(3):
            for b in range(3):
                acc = 0.0
                for k in range(3):
                    for l in range(3):
                        acc += rot_cv[k, a] * dm[k, l] * rot_cv[l, b]
                dsig[a, b] = acc
        qw = quats[i, 0]
        qx = quats[i, 1]
        qy = quats[i, 2]
        qz = quats[i, 3]
        _rotmat(qw, qx, qy, qz, r)
        for k in range(3):
            sk = scales[i, k]
            quad = 0.0
            for a in range(3):
                for b in range(3):
                    quad += r[a, k] * dsig[a, b] * r[b, k]
            d_logscale[i, k] = 2.0 * sk * sk * quad
        for a in range(3):
            for b in range(3):
                acc = 0.0
                for k in range(3):
                    acc += dsig[a, k] * r[k, b]
                drot[a, b] = 2.0 * acc * scales[i, b] * scales[i, b]
        _drot_dq(qw, qx, qy, qz, drot, dq)
        qn = math.sqrt(raw_quats[i, 0] ** 2 + raw_quats[i, 1] ** 2 + raw_quats[i, 2] ** 2 + raw_quats[i, 3] ** 2)
        dot = qw * dq[0] + qx * dq[1] + qy * dq[2] + qz * dq[3]
        d_quat[i, 0] = (dq[0] - qw * dot) / qn
        d_quat[i, 1] = (dq[1] - qx * dot) / qn
        d_quat[i, 2] = (dq[2] - qy * dot) / qn
        d_quat[i, 3] = (dq[3] - qz * dot) / qn
