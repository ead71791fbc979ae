"""Numba tile kernels for compositing: forward and backward.

Primitives are binned to screen tiles by their bounding rects (numpy side),
then a compiled loop walks tile -> pixel -> depth-ordered primitives. The
per-pixel evaluation rule (inside rect, transmittance >= T_EPS) matches the
numpy fallback exactly. Kernels are single-threaded so gradient accumulation
and every reduction order is deterministic.
"""

from __future__ import annotations

import numpy as np
from numba import njit

T_EPS = 1e-4


def _bin_tiles(rect: np.ndarray, H: int, W: int, tile: int):
    """CSR lists of depth-ordered primitive indices per tile."""
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    n_tiles = ntx * nty
    pair_tiles: list[int] = []
    pair_prims: list[int] = []
    for i in range(rect.shape[0]):
        x0, x1, y0, y1 = rect[i]
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(int(y0) // tile, int(y1) // tile + 1):
            base = ty * ntx
            for tx in range(int(x0) // tile, int(x1) // tile + 1):
                pair_tiles.append(base + tx)
                pair_prims.append(i)
    if pair_tiles:
        t = np.asarray(pair_tiles, dtype=np.int64)
        p = np.asarray(pair_prims, dtype=np.int64)
        order = np.lexsort((p, t))  # per tile, keep depth order
        t, p = t[order], p[order]
        starts = np.searchsorted(t, np.arange(n_tiles + 1))
    else:
        p = np.empty(0, dtype=np.int64)
        starts = np.zeros(n_tiles + 1, dtype=np.int64)
    return starts.astype(np.int64), p, ntx, nty


@njit(cache=True)
def _forward_kernel(mean2d, inv_cov, depth, alpha, color, dyn, rect,
                    starts, entries, ntx, nty, tile, H, W, bg,
                    out_color, out_alpha, out_depth, out_dyn):
    for ty in range(nty):
        for tx in range(ntx):
            tid = ty * ntx + tx
            lo, hi = starts[tid], starts[tid + 1]
            y_end = min((ty + 1) * tile, H)
            x_end = min((tx + 1) * tile, W)
            for py in range(ty * tile, y_end):
                cy = py + 0.5
                for px in range(tx * tile, x_end):
                    cx = px + 0.5
                    T = 1.0
                    cr = 0.0
                    cg = 0.0
                    cb = 0.0
                    aa = 0.0
                    dd = 0.0
                    dy_acc = 0.0
                    for e in range(lo, hi):
                        if T < T_EPS:
                            break
                        i = entries[e]
                        if px < rect[i, 0] or px > rect[i, 1] or py < rect[i, 2] or py > rect[i, 3]:
                            continue
                        dx = cx - mean2d[i, 0]
                        dyv = cy - mean2d[i, 1]
                        q = inv_cov[i, 0] * dx * dx + 2.0 * inv_cov[i, 1] * dx * dyv \
                            + inv_cov[i, 2] * dyv * dyv
                        contrib = alpha[i] * np.exp(-0.5 * q)
                        w = contrib * T
                        cr += w * color[i, 0]
                        cg += w * color[i, 1]
                        cb += w * color[i, 2]
                        aa += w
                        dd += w * depth[i]
                        dy_acc += w * dyn[i]
                        T *= 1.0 - contrib
                    out_color[py, px, 0] = cr + T * bg[0]
                    out_color[py, px, 1] = cg + T * bg[1]
                    out_color[py, px, 2] = cb + T * bg[2]
                    out_alpha[py, px] = aa
                    out_depth[py, px] = dd
                    out_dyn[py, px] = dy_acc


def forward(mean2d, inv_cov, depth, alpha, color, dyn, rect, H, W, bg, tile):
    out_color = np.zeros((H, W, 3))
    out_alpha = np.zeros((H, W))
    out_depth = np.zeros((H, W))
    out_dyn = np.zeros((H, W))
    starts, entries, ntx, nty = _bin_tiles(rect, H, W, tile)
    _forward_kernel(mean2d, inv_cov, depth, alpha, color, dyn, rect,
                    starts, entries, ntx, nty, tile, H, W, bg,
                    out_color, out_alpha, out_depth, out_dyn)
    return out_color, out_alpha, out_depth, out_dyn


@njit(cache=True)
def _backward_kernel(mean2d, inv_cov, depth, alpha, color, dyn, rect,
                     starts, entries, ntx, nty, tile, H, W, bg,
                     grad_color, grad_dyn,
                     g_color, g_dyn, g_alpha, g_mean2d, g_cov2d):
    max_len = 0
    for tid in range(starts.shape[0] - 1):
        max_len = max(max_len, starts[tid + 1] - starts[tid])
    hit_idx = np.empty(max_len, dtype=np.int64)
    hit_g = np.empty(max_len)  # gaussian falloff exp(-q/2)
    hit_T = np.empty(max_len)
    for ty in range(nty):
        for tx in range(ntx):
            tid = ty * ntx + tx
            lo, hi = starts[tid], starts[tid + 1]
            if lo == hi:
                continue
            y_end = min((ty + 1) * tile, H)
            x_end = min((tx + 1) * tile, W)
            for py in range(ty * tile, y_end):
                cy = py + 0.5
                for px in range(tx * tile, x_end):
                    cx = px + 0.5
                    gc0 = grad_color[py, px, 0]
                    gc1 = grad_color[py, px, 1]
                    gc2 = grad_color[py, px, 2]
                    gd = grad_dyn[py, px]
                    # forward replay over this pixel
                    T = 1.0
                    k = 0
                    for e in range(lo, hi):
                        if T < T_EPS:
                            break
                        i = entries[e]
                        if px < rect[i, 0] or px > rect[i, 1] or py < rect[i, 2] or py > rect[i, 3]:
                            continue
                        dx = cx - mean2d[i, 0]
                        dyv = cy - mean2d[i, 1]
                        q = inv_cov[i, 0] * dx * dx + 2.0 * inv_cov[i, 1] * dx * dyv \
                            + inv_cov[i, 2] * dyv * dyv
                        G = np.exp(-0.5 * q)
                        hit_idx[k] = i
                        hit_g[k] = G
                        hit_T[k] = T
                        k += 1
                        T *= 1.0 - alpha[i] * G
                    # back-to-front suffix accumulation
                    S = gc0 * bg[0] + gc1 * bg[1] + gc2 * bg[2]
                    for j in range(k - 1, -1, -1):
                        i = hit_idx[j]
                        G = hit_g[j]
                        a = alpha[i] * G
                        Tpre = hit_T[j]
                        w = a * Tpre
                        s_i = gc0 * color[i, 0] + gc1 * color[i, 1] + gc2 * color[i, 2] \
                            + gd * dyn[i]
                        g_color[i, 0] += w * gc0
                        g_color[i, 1] += w * gc1
                        g_color[i, 2] += w * gc2
                        g_dyn[i] += w * gd
                        dL_da = Tpre * (s_i - S)
                        g_alpha[i] += dL_da * G
                        dx = cx - mean2d[i, 0]
                        dyv = cy - mean2d[i, 1]
                        adx = inv_cov[i, 0] * dx + inv_cov[i, 1] * dyv
                        ady = inv_cov[i, 1] * dx + inv_cov[i, 2] * dyv
                        coef = dL_da * a
                        g_mean2d[i, 0] += coef * adx
                        g_mean2d[i, 1] += coef * ady
                        g_cov2d[i, 0] += 0.5 * coef * adx * adx
                        g_cov2d[i, 1] += 0.5 * coef * adx * ady
                        g_cov2d[i, 2] += 0.5 * coef * ady * ady
                        S = a * s_i + (1.0 - a) * S


def backward(mean2d, inv_cov, depth, alpha, color, dyn, rect, grad_color, grad_dyn,
             bg, tile):
    m = mean2d.shape[0]
    H, W = grad_dyn.shape
    g_color = np.zeros((m, 3))
    g_dyn = np.zeros(m)
    g_alpha = np.zeros(m)
    g_mean2d = np.zeros((m, 2))
    g_cov2d = np.zeros((m, 3))
    starts, entries, ntx, nty = _bin_tiles(rect, H, W, tile)
    if entries.shape[0]:
        _backward_kernel(mean2d, inv_cov, depth, alpha, color, dyn, rect,
                         starts, entries, ntx, nty, tile, H, W, bg,
                         grad_color, grad_dyn, g_color, g_dyn, g_alpha,
                         g_mean2d, g_cov2d)
    return g_color, g_dyn, g_alpha, g_mean2d, g_cov2d
