"""Software tile-based Gaussian splatting with analytic gradients.

Primitives are projected to screen space (EWA-style: cov2d = J W Sigma W^T J^T
with a blur floor on the diagonal), depth-sorted front to back and
alpha-composited per pixel with a transmittance early-out. Color, dynamic
score and depth channels share the same per-primitive weights
w_i = alpha_i * exp(-0.5 q_i) * T_i; accumulated alpha is sum(w_i).

The per-pixel compositing loops are the hot path and exist twice: a numba
tile kernel and a pure-numpy scatter fallback (see backend.py). Both apply
the same evaluation rule — a pixel evaluates a primitive iff it lies inside
the primitive's conservative bounding rect — so the two paths agree to
floating-point library precision.

Backward returns gradients for color, opacity, mean and dynamic score;
scale/rotation gradients are intentionally zero (shape parameters stay
frozen after activation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .gaussians import GaussianSet
from .geom import NEAR_PLANE, CameraModel, transform_points

BLUR_FLOOR = 0.3         # px^2 added to the cov2d diagonal
T_EPS = 1e-4             # transmittance early-out
CULL_WEIGHT = 1e-12      # rect bound: ignore contributions below this weight
_CHI2_99 = 9.21          # 99% mass radius^2 multiplier for 2 dof


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray   # (2,) pixels
    cov2d: np.ndarray    # (2, 2) pixels^2, symmetric positive-definite
    depth: float         # camera-frame z, meters
    alpha: float
    color: np.ndarray
    dyn: float


@dataclass
class RenderedFrame:
    color: np.ndarray    # (H, W, 3)
    alpha: np.ndarray    # (H, W)
    depth: np.ndarray    # (H, W) alpha-weighted depth accumulation
    dyn: np.ndarray      # (H, W)


@dataclass
class _Projected:
    """Depth-sorted visible primitives in kernel-ready layout."""

    idx: np.ndarray       # (M,) indices into the original set, depth order
    mean2d: np.ndarray    # (M, 2)
    cov2d: np.ndarray     # (M, 3) upper-triangular (xx, xy, yy)
    inv_cov: np.ndarray   # (M, 3) inverse, same layout
    depth: np.ndarray     # (M,)
    alpha: np.ndarray     # (M,)
    color: np.ndarray     # (M, 3)
    dyn: np.ndarray       # (M,)
    rect: np.ndarray      # (M, 4) int64 inclusive pixel bounds [x0, x1, y0, y1]
    cam_xyz: np.ndarray   # (M, 3) camera-frame means
    cov_cam: np.ndarray   # (M, 3, 3) camera-frame 3D covariances


def _project_batch(gs: GaussianSet, cam: CameraModel) -> _Projected:
    n = len(gs)
    if n == 0:
        return _empty_projected()
    pose = cam.cam_from_ego
    pc = transform_points(pose, gs.means)
    z = pc[:, 2]
    front = z > NEAR_PLANE
    zs = np.where(front, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    mean_ok = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    if not mean_ok.any():
        return _empty_projected()

    W = pose.rotation
    cov_cam = np.einsum("ij,njk,lk->nil", W, gs.covariances(), W)
    fx, fy = cam.fx, cam.fy
    x, y = pc[:, 0], pc[:, 1]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * x / zs**2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * y / zs**2
    c2 = np.einsum("nij,njk,nlk->nil", J, cov_cam, J)
    cxx = c2[:, 0, 0] + BLUR_FLOOR
    cxy = c2[:, 0, 1]
    cyy = c2[:, 1, 1] + BLUR_FLOOR

    # largest eigenvalue -> visibility ellipse and conservative cull radius
    mid = 0.5 * (cxx + cyy)
    disc = np.sqrt(np.maximum(0.25 * (cxx - cyy) ** 2 + cxy**2, 0.0))
    lam_max = mid + disc
    r99 = np.sqrt(_CHI2_99 * lam_max)
    ellipse_ok = (u + r99 >= 0) & (u - r99 < cam.width) & (v + r99 >= 0) & (v - r99 < cam.height)
    vis = mean_ok & ellipse_ok
    if not vis.any():
        return _empty_projected()

    idx = np.nonzero(vis)[0]
    order = np.argsort(z[idx], kind="stable")
    idx = idx[order]

    cxx, cxy, cyy = cxx[idx], cxy[idx], cyy[idx]
    det = cxx * cyy - cxy**2
    inv = np.stack([cyy / det, -cxy / det, cxx / det], axis=1)
    alpha = gs.opacities[idx]
    lam = lam_max[idx]
    with np.errstate(divide="ignore"):
        qmax = 2.0 * np.maximum(np.log(np.maximum(alpha, 1e-300)) - np.log(CULL_WEIGHT), 0.0)
    r = np.sqrt(qmax * lam)
    mu = np.stack([u[idx], v[idx]], axis=1)
    rect = np.empty((idx.shape[0], 4), dtype=np.int64)
    rect[:, 0] = np.maximum(np.ceil(mu[:, 0] - r - 0.5), 0)
    rect[:, 1] = np.minimum(np.floor(mu[:, 0] + r - 0.5), cam.width - 1)
    rect[:, 2] = np.maximum(np.ceil(mu[:, 1] - r - 0.5), 0)
    rect[:, 3] = np.minimum(np.floor(mu[:, 1] + r - 0.5), cam.height - 1)

    return _Projected(
        idx=idx, mean2d=mu, cov2d=np.stack([cxx, cxy, cyy], axis=1), inv_cov=inv,
        depth=z[idx], alpha=alpha, color=gs.colors[idx], dyn=gs.dynamics[idx],
        rect=rect, cam_xyz=pc[idx], cov_cam=cov_cam[idx],
    )


def _empty_projected() -> _Projected:
    return _Projected(
        idx=np.empty(0, dtype=np.int64), mean2d=np.empty((0, 2)),
        cov2d=np.empty((0, 3)), inv_cov=np.empty((0, 3)), depth=np.empty(0),
        alpha=np.empty(0), color=np.empty((0, 3)), dyn=np.empty(0),
        rect=np.empty((0, 4), dtype=np.int64), cam_xyz=np.empty((0, 3)),
        cov_cam=np.empty((0, 3, 3)),
    )


def project_gaussian(gs: GaussianSet, i: int, cam: CameraModel) -> ProjectedGaussian | None:
    """Project one primitive; None when its mean fails projection or its 99%
    ellipse misses the image."""
    single = gs.select([i])
    p = _project_batch(single, cam)
    if p.idx.shape[0] == 0:
        return None
    cov = np.array([[p.cov2d[0, 0], p.cov2d[0, 1]], [p.cov2d[0, 1], p.cov2d[0, 2]]])
    return ProjectedGaussian(
        mean2d=p.mean2d[0], cov2d=cov, depth=float(p.depth[0]),
        alpha=float(p.alpha[0]), color=p.color[0], dyn=float(p.dyn[0]),
    )


def render(gs: GaussianSet, cam: CameraModel, background=(0.0, 0.0, 0.0),
           tile: int = 16) -> RenderedFrame:
    """Composite the set into color/alpha/depth/dyn buffers over background."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    H, W = cam.height, cam.width
    p = _project_batch(gs, cam)
    if backend.numba_active():
        from ._compose_numba import forward as _forward
    else:
        from ._compose_numpy import forward as _forward
    color, alpha, depth, dyn = _forward(
        p.mean2d, p.inv_cov, p.depth, p.alpha, p.color, p.dyn, p.rect, H, W, bg, tile
    )
    return RenderedFrame(color=color, alpha=alpha, depth=depth, dyn=dyn)


def render_backward(gs: GaussianSet, cam: CameraModel, grad_color: np.ndarray,
                    grad_dyn: np.ndarray, background=(0.0, 0.0, 0.0),
                    tile: int = 16) -> dict[str, np.ndarray]:
    """Analytic gradients of the composited color/dyn channels.

    Returns per-primitive arrays for the full input set: 'color' (N, 3),
    'opacity' (N,), 'mean' (N, 3), 'dyn' (N,); 'scale' and 'rotation' are
    returned as zeros (out of scope by contract).
    """
    H, W = cam.height, cam.width
    if grad_color.shape != (H, W, 3) or grad_dyn.shape != (H, W):
        raise ValueError("upstream gradient shapes must match the camera image")
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    n = len(gs)
    out = {
        "color": np.zeros((n, 3)), "opacity": np.zeros(n), "mean": np.zeros((n, 3)),
        "dyn": np.zeros(n), "scale": np.zeros((n, 3)), "rotation": np.zeros((n, 4)),
    }
    p = _project_batch(gs, cam)
    m = p.idx.shape[0]
    if m == 0:
        return out
    if backend.numba_active():
        from ._compose_numba import backward as _backward
    else:
        from ._compose_numpy import backward as _backward
    g_color, g_dyn, g_alpha, g_mean2d, g_cov2d = _backward(
        p.mean2d, p.inv_cov, p.depth, p.alpha, p.color, p.dyn, p.rect,
        np.ascontiguousarray(grad_color, dtype=np.float64),
        np.ascontiguousarray(grad_dyn, dtype=np.float64), bg, tile,
    )

    # chain mean2d and cov2d gradients back to the 3D means
    fx, fy = cam.fx, cam.fy
    x, y, z = p.cam_xyz.T
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z**2
    g_xcam = np.einsum("mij,mi->mj", J, g_mean2d)

    G2d = np.empty((m, 2, 2))
    G2d[:, 0, 0] = g_cov2d[:, 0]
    G2d[:, 0, 1] = G2d[:, 1, 0] = g_cov2d[:, 1]
    G2d[:, 1, 1] = g_cov2d[:, 2]
    dJ = 2.0 * np.einsum("mij,mjk,mlk->mil", G2d, J, p.cov_cam)
    g_xcam[:, 0] += dJ[:, 0, 2] * (-fx / z**2)
    g_xcam[:, 1] += dJ[:, 1, 2] * (-fy / z**2)
    g_xcam[:, 2] += (
        dJ[:, 0, 0] * (-fx / z**2)
        + dJ[:, 1, 1] * (-fy / z**2)
        + dJ[:, 0, 2] * (2.0 * fx * x / z**3)
        + dJ[:, 1, 2] * (2.0 * fy * y / z**3)
    )
    g_mean = g_xcam @ cam.cam_from_ego.rotation

    out["color"][p.idx] = g_color
    out["dyn"][p.idx] = g_dyn
    out["opacity"][p.idx] = g_alpha
    out["mean"][p.idx] = g_mean
    return out
