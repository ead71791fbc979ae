"""Desk-scale photometric refinement of a decoded Gaussian set.

Optimizes color and opacity only (shape parameters stay frozen) with
momentum gradient descent on the pre-activation logits, driving the weighted
MSE of the rendered input views toward their ground-truth images.
"""

from __future__ import annotations

import numpy as np

from .gaussians import GaussianSet
from .geom import CameraModel
from .losses import loss_mse
from .nets import MomentumOptimizer, logit, sigmoid
from .renderer import render, render_backward


def refine_colors_opacities(
    gs: GaussianSet,
    cams: list[CameraModel],
    gt_images: np.ndarray,
    background,
    steps: int = 200,
    lr: float = 2.0,
    momentum: float = 0.9,
    mse_weight: float = 5.0,
    tile: int = 16,
) -> tuple[GaussianSet, list[float]]:
    """Returns (refined copy of gs, per-step loss history)."""
    out = gs.copy()
    c_raw = logit(out.colors)
    a_raw = logit(out.opacities)
    opt = MomentumOptimizer([c_raw, a_raw], lr=lr, momentum=momentum)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    history = []
    zero_dyn = None
    for _ in range(steps):
        out.colors = sigmoid(c_raw)
        out.opacities = sigmoid(a_raw)
        g_c = np.zeros_like(c_raw)
        g_a = np.zeros_like(a_raw)
        step_loss = 0.0
        for k, cam in enumerate(cams):
            fr = render(out, cam, bg, tile=tile)
            val, g_img = loss_mse(fr.color, gt_images[k])
            step_loss += mse_weight * val
            if zero_dyn is None or zero_dyn.shape != fr.dyn.shape:
                zero_dyn = np.zeros_like(fr.dyn)
            grads = render_backward(out, cam, mse_weight * g_img, zero_dyn, bg, tile=tile)
            g_c += grads["color"]
            g_a += grads["opacity"]
        g_c *= out.colors * (1.0 - out.colors)
        g_a *= out.opacities * (1.0 - out.opacities)
        opt.step([g_c, g_a])
        history.append(step_loss)
    out.colors = sigmoid(c_raw)
    out.opacities = sigmoid(a_raw)
    return out, history
