"""Training objective terms and image quality metrics.

Input views contribute weighted MSE, dynamic-score cross-entropy and scale
smooth-L1; novel views contribute background-masked MSE only. A perceptual
term slot exists in the config for weight-compatibility but always
contributes zero (no pretrained network in this package). Every loss returns
its gradient alongside the value so the renderer backward can consume it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AllMasked, DimensionMismatch, LengthMismatch

BCE_EPS = 1e-6
SMOOTH_L1_BETA = 1.0


@dataclass(frozen=True)
class LossConfig:
    lambda_mse: float = 5.0
    lambda_lpips: float = 0.05   # slot kept for weight compatibility; term is always 0
    lambda_dyn: float = 0.05
    lambda_scale: float = 0.1
    lpips_enabled: bool = False

    def __post_init__(self):
        for name in ("lambda_mse", "lambda_lpips", "lambda_dyn", "lambda_scale"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")
        if self.lpips_enabled:
            raise ValueError("perceptual loss is not available in this package")


@dataclass
class SupervisionTargets:
    """Per-view ground truth: image, dynamic mask, background mask (true =
    not dynamic), role ('input' or 'novel'), and the scale target."""

    image: np.ndarray                 # (H, W, 3)
    dynamic_mask: np.ndarray          # (H, W) bool
    background_mask: np.ndarray       # (H, W) bool
    role: str = "input"
    gamma_target: float | None = None

    def __post_init__(self):
        hw = self.image.shape[:2]
        if self.dynamic_mask.shape != hw or self.background_mask.shape != hw:
            raise DimensionMismatch("masks must match image dimensions")
        if self.role not in ("input", "novel"):
            raise ValueError(f"unknown view role {self.role!r}")


def loss_mse(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None):
    """Mean squared error over unmasked pixels; returns (value, grad_pred)."""
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    diff = pred - gt
    if mask is None:
        n = diff.size
        if n == 0:
            raise AllMasked("empty image")
        return float(np.sum(diff * diff) / n), 2.0 * diff / n
    if mask.shape != pred.shape[: mask.ndim]:
        raise DimensionMismatch("mask must match leading image dimensions")
    m = mask
    if pred.ndim == mask.ndim + 1:
        m = mask[..., None]
    n = int(np.count_nonzero(m)) * (pred.shape[-1] if pred.ndim == mask.ndim + 1 else 1)
    if n == 0:
        raise AllMasked("mask leaves no pixels")
    masked = np.where(m, diff, 0.0)
    return float(np.sum(masked * masked) / n), 2.0 * masked / n


def loss_dyn(pred_dyn: np.ndarray, gt_mask: np.ndarray):
    """Mean binary cross-entropy with probability clamping; (value, grad)."""
    if pred_dyn.shape != gt_mask.shape:
        raise DimensionMismatch(f"pred {pred_dyn.shape} vs mask {gt_mask.shape}")
    y = gt_mask.astype(np.float64)
    p = np.clip(pred_dyn, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    val = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))
    grad = (-(y / p) + (1.0 - y) / (1.0 - p)) / n
    # clamp has zero slope outside its active range
    grad = np.where((pred_dyn > BCE_EPS) & (pred_dyn < 1.0 - BCE_EPS), grad, 0.0)
    return val, grad


def loss_scale(pred: np.ndarray, target: np.ndarray):
    """Mean smooth-L1 with transition beta = 1; (value, grad_pred)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise LengthMismatch(f"pred {pred.shape} vs target {target.shape}")
    d = pred - target
    ad = np.abs(d)
    quad = ad < SMOOTH_L1_BETA
    val = np.where(quad, 0.5 * d * d / SMOOTH_L1_BETA, ad - 0.5 * SMOOTH_L1_BETA)
    grad = np.where(quad, d / SMOOTH_L1_BETA, np.sign(d))
    n = pred.size
    return float(val.sum() / n), grad / n


@dataclass
class ViewRender:
    """Rendered channels for one supervised view."""

    color: np.ndarray
    dyn: np.ndarray


@dataclass
class TotalLoss:
    value: float
    terms: dict[str, float]
    grad_color: list[np.ndarray]
    grad_dyn: list[np.ndarray]
    grad_gamma: np.ndarray | None


def total_loss(
    renders: list[ViewRender],
    targets: list[SupervisionTargets],
    cfg: LossConfig,
    gamma_pred: np.ndarray | None = None,
) -> TotalLoss:
    """Weighted objective over all supervised views.

    Input views: lambda_mse * MSE + lambda_dyn * BCE (+ scale term once,
    over the predicted scale vector). Novel views: lambda_mse * masked MSE.
    Returns per-view upstream gradients for the renderer backward.
    """
    if len(renders) != len(targets):
        raise LengthMismatch("one render per target required")
    total = 0.0
    terms = {"mse": 0.0, "dyn": 0.0, "scale": 0.0}
    g_colors, g_dyns = [], []
    for r, t in zip(renders, targets):
        if t.role == "input":
            v, g = loss_mse(r.color, t.image)
            total += cfg.lambda_mse * v
            terms["mse"] += v
            g_color = cfg.lambda_mse * g
            v, g = loss_dyn(r.dyn, t.dynamic_mask)
            total += cfg.lambda_dyn * v
            terms["dyn"] += v
            g_dyn = cfg.lambda_dyn * g
        else:
            v, g = loss_mse(r.color, t.image, mask=t.background_mask)
            total += cfg.lambda_mse * v
            terms["mse"] += v
            g_color = cfg.lambda_mse * g
            g_dyn = np.zeros_like(r.dyn)
        g_colors.append(g_color)
        g_dyns.append(g_dyn)

    grad_gamma = None
    if gamma_pred is not None:
        gamma_target = np.array(
            [t.gamma_target for t in targets if t.role == "input" and t.gamma_target is not None]
        )
        if gamma_target.size:
            v, g = loss_scale(gamma_pred, gamma_target)
            total += cfg.lambda_scale * v
            terms["scale"] += v
            grad_gamma = cfg.lambda_scale * g
    return TotalLoss(value=float(total), terms=terms, grad_color=g_colors,
                     grad_dyn=g_dyns, grad_gamma=grad_gamma)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; +inf when equal."""
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _window_means(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    from numpy.lib.stride_tricks import sliding_window_view

    win = sliding_window_view(img, kernel.shape)
    return np.einsum("hwij,ij->hw", win, kernel)


def ssim(pred: np.ndarray, gt: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5),
    averaged over valid window positions and channels."""
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim == 2:
        pred = pred[:, :, None]
        gt = gt[:, :, None]
    kernel = _gaussian_window()
    if pred.shape[0] < kernel.shape[0] or pred.shape[1] < kernel.shape[1]:
        raise DimensionMismatch("image smaller than the SSIM window")
    c1 = k1**2
    c2 = k2**2
    vals = []
    for ch in range(pred.shape[2]):
        x = pred[:, :, ch].astype(np.float64)
        y = gt[:, :, ch].astype(np.float64)
        mx = _window_means(x, kernel)
        my = _window_means(y, kernel)
        mxx = _window_means(x * x, kernel)
        myy = _window_means(y * y, kernel)
        mxy = _window_means(x * y, kernel)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
