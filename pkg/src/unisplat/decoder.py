"""Dual-branch Gaussian decoding from the fused scaffold.

The point branch anchors one primitive at every valid point of the metric
point map, conditioning on the retrieved voxel feature plus the point's own
pixel feature. The voxel branch emits g primitives per occupied voxel from
the voxel feature alone. Raw head outputs map through fixed activations so
every emitted primitive satisfies its invariants for arbitrary finite
weights.

Raw layout per primitive (15 channels):
    [0:3]  position offset, tanh-bounded
    [3]    opacity logit
    [4:7]  scale, softplus with a floor
    [7:11] quaternion residual around identity
    [11:14] color logits (point branch adds the source pixel's RGB logit)
    [14]   dynamic-score logit
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch
from .gaussians import GaussianSet, SOURCE_POINT, SOURCE_VOXEL, concat_sets
from .nets import TinyNet, logit, sigmoid, softplus
from .scaffold import FeatureMapSet, PointMapFrame, SparseScaffold, bilinear_sample, retrieve_many

RAW_CHANNELS = 15
SCALE_FLOOR = 1e-3
COLOR_LOGIT_EPS = 1e-6


def _activate(raw: np.ndarray, anchors: np.ndarray, offset_bound: np.ndarray,
              s_unit: float, color_logit_bias: np.ndarray | None,
              source: int, frame: int) -> GaussianSet:
    if raw.shape[1] != RAW_CHANNELS:
        raise ShapeMismatch(f"head must emit {RAW_CHANNELS} channels, got {raw.shape[1]}")
    n = raw.shape[0]
    means = anchors + np.tanh(raw[:, 0:3]) * offset_bound
    opac = sigmoid(raw[:, 3])
    scales = SCALE_FLOOR + softplus(raw[:, 4:7]) * s_unit
    quat = raw[:, 7:11] + np.array([1.0, 0.0, 0.0, 0.0])
    quat = quat / np.linalg.norm(quat, axis=1, keepdims=True)
    craw = raw[:, 11:14]
    if color_logit_bias is not None:
        craw = craw + color_logit_bias
    colors = sigmoid(craw)
    dyn = sigmoid(raw[:, 14])
    return GaussianSet(
        means=means, opacities=opac, scales=scales, rotations=quat, colors=colors,
        dynamics=dyn, sources=np.full(n, source, dtype=np.uint8), frame=frame,
    )


def decode_point_branch(
    points: PointMapFrame,
    scaffold: SparseScaffold,
    feats: FeatureMapSet,
    images: np.ndarray,
    net: TinyNet,
    frame: int = 0,
) -> GaussianSet:
    """One primitive per valid point, centered within ||voxel_size||/2 of it.

    images: (n_cam, H, W, 3) source pixels; the color head is a residual on
    the source pixel's RGB so a zero net already reproduces input colors.
    """
    pts, cam_idx, iy, ix = points.valid_points()
    if pts.shape[0] == 0:
        return GaussianSet.empty(frame)
    f3d = retrieve_many(scaffold, pts)
    w_img, h_img = points.image_size
    f2d = np.empty((pts.shape[0], feats.n_channels))
    for k in range(points.n_cameras):
        sel = cam_idx == k
        if not sel.any():
            continue
        uv = np.stack([ix[sel] + 0.5, iy[sel] + 0.5], axis=1).astype(np.float64)
        f2d[sel] = bilinear_sample(feats.features[k], uv, (w_img, h_img))
    x = np.concatenate([f3d, f2d], axis=1)
    if x.shape[1] != net.in_width:
        raise ShapeMismatch(
            f"point head expects {net.in_width} inputs, features give {x.shape[1]}"
        )
    raw = net.forward(x)
    eps = scaffold.grid.voxel_size
    delta_max = float(np.linalg.norm(eps)) / 2.0
    rgb = images[cam_idx, iy, ix].astype(np.float64)
    return _activate(
        raw, pts, np.full((1, 3), delta_max), s_unit=0.5 * float(eps.min()),
        color_logit_bias=logit(rgb, COLOR_LOGIT_EPS), source=SOURCE_POINT, frame=frame,
    )


def decode_voxel_branch(
    scaffold: SparseScaffold,
    net: TinyNet,
    g: int,
    frame: int = 0,
) -> GaussianSet:
    """g primitives per occupied voxel, each within half a voxel of its center."""
    if g < 1:
        raise ValueError("g must be >= 1")
    if net.out_width != RAW_CHANNELS * g:
        raise ShapeMismatch(
            f"voxel head must emit {RAW_CHANNELS * g} channels for g={g}, "
            f"got {net.out_width}"
        )
    if len(scaffold) == 0:
        return GaussianSet.empty(frame)
    raw = net.forward(scaffold.feats).reshape(len(scaffold) * g, RAW_CHANNELS)
    anchors = np.repeat(scaffold.positions, g, axis=0)
    eps = scaffold.grid.voxel_size
    return _activate(
        raw, anchors, (eps / 2.0)[None, :], s_unit=0.5 * float(eps.min()),
        color_logit_bias=None, source=SOURCE_VOXEL, frame=frame,
    )


def decode_frame(
    points: PointMapFrame,
    scaffold: SparseScaffold,
    feats: FeatureMapSet,
    images: np.ndarray,
    point_net: TinyNet,
    voxel_net: TinyNet,
    g: int,
    frame: int = 0,
) -> GaussianSet:
    """Union of the two branches, point primitives first."""
    gp = decode_point_branch(points, scaffold, feats, images, point_net, frame=frame)
    gv = decode_voxel_branch(scaffold, voxel_net, g, frame=frame)
    return concat_sets([gp, gv], frame=frame)
