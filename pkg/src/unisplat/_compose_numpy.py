"""Pure-numpy compositing: per-primitive scatter over its pixel rect.

Primitives arrive depth-sorted. The forward walk keeps a per-pixel
transmittance buffer; a primitive is composited at a pixel iff the pixel
lies inside its rect and the pixel's transmittance is still >= T_EPS, which
is exactly the rule the numba tile kernel applies.
"""

from __future__ import annotations

import numpy as np

T_EPS = 1e-4


def _rect_slices(rect_row):
    x0, x1, y0, y1 = rect_row
    return slice(int(y0), int(y1) + 1), slice(int(x0), int(x1) + 1)


def forward(mean2d, inv_cov, depth, alpha, color, dyn, rect, H, W, bg, tile):
    out_color = np.zeros((H, W, 3))
    out_alpha = np.zeros((H, W))
    out_depth = np.zeros((H, W))
    out_dyn = np.zeros((H, W))
    T = np.ones((H, W))
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    for i in range(mean2d.shape[0]):
        x0, x1, y0, y1 = rect[i]
        if x0 > x1 or y0 > y1:
            continue
        sy, sx = _rect_slices(rect[i])
        dx = xs[sx] - mean2d[i, 0]
        dy = ys[sy] - mean2d[i, 1]
        a, b, c = inv_cov[i]
        q = a * dx[None, :] ** 2 + 2.0 * b * dy[:, None] * dx[None, :] + c * dy[:, None] ** 2
        contrib = alpha[i] * np.exp(-0.5 * q)
        Tpre = T[sy, sx]
        proc = Tpre >= T_EPS
        w = np.where(proc, contrib * Tpre, 0.0)
        out_color[sy, sx] += w[:, :, None] * color[i]
        out_alpha[sy, sx] += w
        out_depth[sy, sx] += w * depth[i]
        out_dyn[sy, sx] += w * dyn[i]
        T[sy, sx] = np.where(proc, Tpre * (1.0 - contrib), Tpre)
    out_color += T[:, :, None] * bg
    return out_color, out_alpha, out_depth, out_dyn


def backward(mean2d, inv_cov, depth, alpha, color, dyn, rect, grad_color, grad_dyn,
             bg, tile):
    m = mean2d.shape[0]
    H, W = grad_dyn.shape
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5

    # forward replay, recording per-primitive falloff (masked by the
    # processed rule) and pre-transmittance
    T = np.ones((H, W))
    g_eff_store: list[np.ndarray | None] = [None] * m
    t_pre_store: list[np.ndarray | None] = [None] * m
    for i in range(m):
        x0, x1, y0, y1 = rect[i]
        if x0 > x1 or y0 > y1:
            continue
        sy, sx = _rect_slices(rect[i])
        dx = xs[sx] - mean2d[i, 0]
        dy = ys[sy] - mean2d[i, 1]
        a, b, c = inv_cov[i]
        q = a * dx[None, :] ** 2 + 2.0 * b * dy[:, None] * dx[None, :] + c * dy[:, None] ** 2
        Tpre = T[sy, sx]
        g_eff = np.where(Tpre >= T_EPS, np.exp(-0.5 * q), 0.0)
        g_eff_store[i] = g_eff
        t_pre_store[i] = Tpre.copy()
        T[sy, sx] = Tpre * (1.0 - alpha[i] * g_eff)

    g_color = np.zeros((m, 3))
    g_dyn = np.zeros(m)
    g_alpha = np.zeros(m)
    g_mean2d = np.zeros((m, 2))
    g_cov2d = np.zeros((m, 3))

    # suffix accumulator S: for each pixel, sum over later primitives of
    # a_j s_j prod(1 - a_k) plus the background term, normalized by T_{i+1}
    S = grad_color @ bg
    for i in range(m - 1, -1, -1):
        g_eff = g_eff_store[i]
        if g_eff is None:
            continue
        sy, sx = _rect_slices(rect[i])
        a_eff = alpha[i] * g_eff
        Tpre = t_pre_store[i]
        gc = grad_color[sy, sx]
        gd = grad_dyn[sy, sx]
        s_i = gc @ color[i] + gd * dyn[i]
        w = a_eff * Tpre
        g_color[i] = np.einsum("yx,yxc->c", w, gc)
        g_dyn[i] = np.sum(w * gd)
        dL_da = Tpre * (s_i - S[sy, sx])
        g_alpha[i] = np.sum(dL_da * g_eff)
        dx = xs[sx] - mean2d[i, 0]
        dy2 = ys[sy] - mean2d[i, 1]
        a, b, c = inv_cov[i]
        adx = a * dx[None, :] + b * dy2[:, None]
        ady = b * dx[None, :] + c * dy2[:, None]
        coef = dL_da * a_eff
        g_mean2d[i, 0] = np.sum(coef * adx)
        g_mean2d[i, 1] = np.sum(coef * ady)
        # full-matrix gradient dL/dSigma2d; (xy) entry is one of the two
        # equal off-diagonals, the chain in renderer.py mirrors it
        g_cov2d[i, 0] = 0.5 * np.sum(coef * adx * adx)
        g_cov2d[i, 1] = 0.5 * np.sum(coef * adx * ady)
        g_cov2d[i, 2] = 0.5 * np.sum(coef * ady * ady)
        S[sy, sx] = a_eff * s_i + (1.0 - a_eff) * S[sy, sx]

    return g_color, g_dyn, g_alpha, g_mean2d, g_cov2d
