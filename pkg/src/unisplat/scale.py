"""Per-camera metric scale recovery for scale-ambiguous point maps.

A predicted point map is metric up to one positive factor per camera. Given
reference correspondences (predicted point, metric point) the factor is the
closed-form least-squares minimizer of sum ||g*p - q||^2; a trimmed variant
tolerates gross outliers. A learned head can predict the factors from pooled
geometry features instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateReference, LengthMismatch, ShapeMismatch
from .nets import TinyNet, softplus

GAMMA_FLOOR = 1e-6


@dataclass(frozen=True)
class ScaleReference:
    """Per-camera correspondence pairs: predicted (pre-scale) vs metric points."""

    pred: list[np.ndarray]  # each (M_k, 3)
    ref: list[np.ndarray]   # each (M_k, 3)

    def __post_init__(self):
        if len(self.pred) != len(self.ref):
            raise LengthMismatch("pred/ref camera counts differ")
        for k, (p, q) in enumerate(zip(self.pred, self.ref)):
            if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 1:
                raise ValueError(f"camera {k}: pairs must be matching (M, 3) arrays, M >= 1")
            if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
                raise ValueError(f"camera {k}: non-finite coordinates")

    @property
    def n_cameras(self) -> int:
        return len(self.pred)


def _check_gamma(gamma: np.ndarray) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    if not np.all(np.isfinite(gamma)) or np.any(gamma <= 0):
        raise ValueError("scale factors must be positive and finite")
    return gamma


def optimal_scale_ls(ref: ScaleReference) -> np.ndarray:
    """Closed-form per-camera scale: sum<p,q> / sum<p,p>, clamped to >= 1e-6."""
    out = np.empty(ref.n_cameras)
    for k in range(ref.n_cameras):
        p, q = ref.pred[k], ref.ref[k]
        denom = float(np.sum(p * p))
        if denom == 0.0:
            raise DegenerateReference(f"camera {k}: all predicted points are zero")
        out[k] = max(float(np.sum(p * q)) / denom, GAMMA_FLOOR)
    return out


def optimal_scale_robust(ref: ScaleReference, inlier_fraction: float = 0.7) -> np.ndarray:
    """Trimmed least squares: keep the inlier_fraction of pairs whose norm
    ratio ||q||/||p|| sits closest to the per-camera median ratio, then solve
    on the kept pairs. Deterministic given input order (stable sort)."""
    if not (0.0 < inlier_fraction <= 1.0):
        raise ValueError("inlier_fraction must be in (0, 1]")
    out = np.empty(ref.n_cameras)
    for k in range(ref.n_cameras):
        p, q = ref.pred[k], ref.ref[k]
        pn = np.linalg.norm(p, axis=1)
        qn = np.linalg.norm(q, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(pn > 0.0, qn / pn, np.inf)
        finite = ratio[np.isfinite(ratio)]
        if finite.size == 0:
            raise DegenerateReference(f"camera {k}: all predicted points are zero")
        dev = np.abs(ratio - np.median(finite))
        m = max(1, int(np.ceil(inlier_fraction * p.shape[0])))
        keep = np.argsort(dev, kind="stable")[:m]
        pk, qk = p[keep], q[keep]
        denom = float(np.sum(pk * pk))
        if denom == 0.0:
            raise DegenerateReference(f"camera {k}: trimmed set has zero predictions")
        out[k] = max(float(np.sum(pk * qk)) / denom, GAMMA_FLOOR)
    return out


def apply_scale(points: "PointMapFrame", gamma: np.ndarray) -> "PointMapFrame":
    """Multiply every camera's points by its factor; validity is untouched."""
    from .scaffold import PointMapFrame  # local import to avoid a cycle

    gamma = _check_gamma(gamma)
    if gamma.shape != (points.n_cameras,):
        raise LengthMismatch(
            f"gamma has {gamma.shape[0]} entries for {points.n_cameras} cameras"
        )
    scaled = points.points * gamma[:, None, None, None]
    return PointMapFrame(points=scaled, valid=points.valid)


def predict_scale(pooled_feature: np.ndarray, mlp: TinyNet) -> np.ndarray:
    """Per-camera scale from pooled per-camera features; softplus keeps it > 0."""
    pooled_feature = np.atleast_2d(np.asarray(pooled_feature, dtype=np.float64))
    if mlp.out_width != 1:
        raise ShapeMismatch("scale head must have a single output")
    raw = mlp.forward(pooled_feature)[:, 0]
    return softplus(raw)
