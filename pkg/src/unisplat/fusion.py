"""Spatio-temporal scaffold fusion.

Spatial fusion runs a submanifold sparse conv stack (optionally a small
U-Net with stride-2 pool/unpool stages) over the current scaffold. Temporal
fusion warps the previous fused scaffold into the current frame with the
known ego motion, tags both sides with age embeddings, merges them by sparse
addition and refines the result with a second conv stack.

All sparse maps iterate in lexicographic key order, so results are
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ChannelMismatch, GridMismatch
from .geom import GridSpec, Pose, transform_points
from .nets import leaky_relu
from .scaffold import SparseScaffold

# 3x3x3 stencil offsets in lexicographic order; center tap is index 13.
_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)
CENTER_TAP = 13


@dataclass
class ConvLayer:
    """Sparse 3x3x3 convolution: weight (C_out, C_in, 27), bias (C_out,)."""

    weight: np.ndarray
    bias: np.ndarray
    nonlinear: bool = True
    residual: bool = False

    def __post_init__(self):
        if self.weight.ndim != 3 or self.weight.shape[2] != 27:
            raise ChannelMismatch(f"weight must be (C_out, C_in, 27), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ChannelMismatch("bias width must match C_out")
        if self.residual and self.weight.shape[0] != self.weight.shape[1]:
            raise ChannelMismatch("residual layers need C_in == C_out")

    @staticmethod
    def identity(channels: int) -> "ConvLayer":
        w = np.zeros((channels, channels, 27))
        w[:, :, CENTER_TAP] = np.eye(channels)
        return ConvLayer(w, np.zeros(channels), nonlinear=False)

    @staticmethod
    def random(c_in: int, c_out: int, rng: np.random.Generator, scale: float = 1.0,
               nonlinear: bool = True, residual: bool = False) -> "ConvLayer":
        w = rng.standard_normal((c_out, c_in, 27)) * scale / np.sqrt(27.0 * c_in)
        return ConvLayer(w, np.zeros(c_out), nonlinear=nonlinear, residual=residual)


@dataclass
class SparseConvNet:
    """Conv stack with an optional symmetric down/up schedule.

    encoder[0] runs at input resolution; each later encoder stage follows a
    stride-2 mean-pool of occupancy. decoder stages (one fewer than encoder
    stages) mirror the pools with nearest-neighbor unpooling; the unpooled
    features are concatenated with the skip features from the matching
    encoder stage, so the first layer of each decoder stage takes
    C_skip + C_up inputs. With a single encoder stage this is a plain
    stride-1 stack.
    """

    encoder: list[list[ConvLayer]]
    decoder: list[list[ConvLayer]] = field(default_factory=list)

    def __post_init__(self):
        if not self.encoder or not self.encoder[0]:
            raise ChannelMismatch("need at least one conv layer")
        if self.decoder and len(self.decoder) != len(self.encoder) - 1:
            raise ChannelMismatch("decoder must have one stage per downsample")
        if len(self.encoder) > 1 and not self.decoder:
            raise ChannelMismatch("downsampling stages require decoder stages")

    @property
    def in_channels(self) -> int:
        return self.encoder[0][0].weight.shape[1]

    @staticmethod
    def identity(channels: int, n_layers: int) -> "SparseConvNet":
        return SparseConvNet([[ConvLayer.identity(channels) for _ in range(n_layers)]])

    @staticmethod
    def random(channels: int, n_layers: int, rng: np.random.Generator,
               scale: float = 1.0) -> "SparseConvNet":
        layers = [
            ConvLayer.random(channels, channels, rng, scale=scale, residual=True)
            for _ in range(n_layers)
        ]
        return SparseConvNet([layers])

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for side, stages in (("enc", self.encoder), ("dec", self.decoder)):
            for i, stage in enumerate(stages):
                for j, layer in enumerate(stage):
                    out[f"{side}{i}.{j}.weight"] = layer.weight
                    out[f"{side}{i}.{j}.bias"] = layer.bias
        return out


@dataclass
class TimeEmbedding:
    """Per-age feature offsets; age 0 = current frame, age 1 = previous fused."""

    table: np.ndarray  # (2, C)

    def __post_init__(self):
        if self.table.ndim != 2 or self.table.shape[0] != 2:
            raise ChannelMismatch(f"embedding table must be (2, C), got {self.table.shape}")
        if not np.all(np.isfinite(self.table)):
            raise ValueError("embedding table must be finite")

    @staticmethod
    def zeros(channels: int) -> "TimeEmbedding":
        return TimeEmbedding(np.zeros((2, channels)))


def _conv_once(layer: ConvLayer, flat: np.ndarray, keys: np.ndarray,
               feats: np.ndarray, dims: np.ndarray) -> np.ndarray:
    """One submanifold convolution over the occupied set."""
    if feats.shape[1] != layer.weight.shape[1]:
        raise ChannelMismatch(
            f"layer expects {layer.weight.shape[1]} channels, scaffold has {feats.shape[1]}"
        )
    n = keys.shape[0]
    out = np.tile(layer.bias, (n, 1))
    keys64 = keys.astype(np.int64)
    for o in range(27):
        nk = keys64 + _OFFSETS[o]
        ok = np.all((nk >= 0) & (nk < dims), axis=1)
        if not ok.any():
            continue
        nflat = (nk[ok, 0] * dims[1] + nk[ok, 1]) * dims[2] + nk[ok, 2]
        pos = np.searchsorted(flat, nflat)
        pos = np.clip(pos, 0, n - 1)
        hit = flat[pos] == nflat
        rows = np.nonzero(ok)[0][hit]
        out[rows] += feats[pos[hit]] @ layer.weight[:, :, o].T
    if layer.residual:
        out = out + feats
    if layer.nonlinear:
        out = leaky_relu(out)
    return out


def _run_stage(stage: list[ConvLayer], flat, keys, feats, dims):
    for layer in stage:
        feats = _conv_once(layer, flat, keys, feats, dims)
    return feats


def _pool(keys: np.ndarray, feats: np.ndarray, dims: np.ndarray):
    """Stride-2 occupancy pool: parent voxel key, mean features."""
    parents = keys.astype(np.int64) // 2
    pdims = (dims + 1) // 2
    pflat = (parents[:, 0] * pdims[1] + parents[:, 1]) * pdims[2] + parents[:, 2]
    uniq, inverse = np.unique(pflat, return_inverse=True)
    n = uniq.shape[0]
    cnt = np.bincount(inverse, minlength=n).astype(np.float64)
    pooled = np.zeros((n, feats.shape[1]))
    np.add.at(pooled, inverse, feats)
    pooled /= cnt[:, None]
    pkeys = np.empty((n, 3), dtype=np.int64)
    pkeys[:, 0] = uniq // (pdims[1] * pdims[2])
    pkeys[:, 1] = (uniq // pdims[2]) % pdims[1]
    pkeys[:, 2] = uniq % pdims[2]
    return pkeys, pooled, uniq, pdims, inverse


def sparse_conv_forward(net: SparseConvNet, s: SparseScaffold) -> SparseScaffold:
    """Run the stack; stride-1 semantics keep the occupied set unchanged."""
    if s.feats.shape[1] != net.in_channels:
        raise ChannelMismatch(
            f"net expects {net.in_channels} channels, scaffold has {s.feats.shape[1]}"
        )
    if len(s) == 0:
        c_out = net.encoder[0][-1].weight.shape[0] if not net.decoder else \
            net.decoder[-1][-1].weight.shape[0]
        return SparseScaffold.empty(s.grid, c_out)
    dims = s.grid.dims
    keys = s.keys.astype(np.int64)
    flat = s.grid.flatten_keys(s.keys)
    feats = _run_stage(net.encoder[0], flat, keys, s.feats, dims)

    skips = [(keys, flat, dims, feats)]
    inverse_maps = []
    for stage in net.encoder[1:]:
        keys, feats, flat, dims, inverse = _pool(keys, feats, dims)
        inverse_maps.append(inverse)
        feats = _run_stage(stage, flat, keys, feats, dims)
        skips.append((keys, flat, dims, feats))

    # decoder stages run coarse-to-fine, each mirroring one pool
    n_down = len(inverse_maps)
    for level, stage in enumerate(net.decoder):
        j = n_down - 1 - level
        fine_keys, fine_flat, fine_dims, fine_feats = skips[j]
        up = feats[inverse_maps[j]]  # nearest-neighbor unpool to fine occupancy
        feats = _run_stage(
            stage, fine_flat, fine_keys, np.concatenate([fine_feats, up], axis=1), fine_dims
        )

    return SparseScaffold(s.grid, s.keys, feats, s.counts, s.centroid_sums)


def warp_scaffold(s: SparseScaffold, T: Pose, target_grid: GridSpec) -> SparseScaffold:
    """Rigidly move a scaffold and re-voxelize into target_grid.

    Entries are keyed by their transformed voxel-center positions; entries
    landing outside the target bounds are dropped. Collisions merge features
    by arithmetic mean and counts by sum; merged centroids are count-weighted
    and clamped into the destination voxel so the entry invariant holds after
    rotation.
    """
    if len(s) == 0:
        return SparseScaffold.empty(target_grid, s.n_channels)
    new_pos = transform_points(T, s.positions)
    # centroid sums transform linearly: sum(R p + t) = R sum + count * t
    new_sums = s.centroid_sums @ T.rotation.T + s.counts[:, None] * T.translation
    keys, in_bounds = target_grid.point_to_key(new_pos)
    keys = keys[in_bounds]
    feats = s.feats[in_bounds]
    counts = s.counts[in_bounds]
    sums = new_sums[in_bounds]
    if keys.shape[0] == 0:
        return SparseScaffold.empty(target_grid, s.n_channels)
    flat = target_grid.flatten_keys(keys)
    order = np.argsort(flat, kind="stable")
    flat, keys = flat[order], keys[order]
    feats, counts, sums = feats[order], counts[order], sums[order]
    uniq, inverse, group_n = np.unique(flat, return_inverse=True, return_counts=True)
    n = uniq.shape[0]
    if n == flat.shape[0]:  # no collisions: exact passthrough
        out_keys, out_feats, out_counts, out_sums = keys, feats, counts, sums
    else:
        out_feats = np.zeros((n, feats.shape[1]))
        np.add.at(out_feats, inverse, feats)
        out_feats /= group_n[:, None]
        out_counts = np.zeros(n, dtype=np.int64)
        np.add.at(out_counts, inverse, counts)
        out_sums = np.zeros((n, 3))
        np.add.at(out_sums, inverse, sums)
        out_keys = np.empty((n, 3), dtype=np.int32)
        d = target_grid.dims
        out_keys[:, 0] = uniq // (d[1] * d[2])
        out_keys[:, 1] = (uniq // d[2]) % d[1]
        out_keys[:, 2] = uniq % d[2]
    # rotation can push a merged centroid slightly past its voxel face; clamp
    # only where that happened so the exact path stays bit-identical
    lo = target_grid.p_min + out_keys * target_grid.voxel_size
    hi = lo + target_grid.voxel_size
    mean = out_sums / out_counts[:, None]
    clamped = np.clip(mean, lo, hi)
    moved = clamped != mean
    if moved.any():
        out_sums = np.where(moved, clamped * out_counts[:, None], out_sums)
    return SparseScaffold(target_grid, out_keys.astype(np.int32), out_feats,
                          out_counts, out_sums)


def sparse_add(a: SparseScaffold, b: SparseScaffold) -> SparseScaffold:
    """Key union; features and counts sum on the intersection and copy
    elsewhere. Centroid sums add, so the merged centroid is the
    count-weighted mean."""
    if not a.grid.same_as(b.grid):
        raise GridMismatch("operands use different grids")
    if a.n_channels != b.n_channels:
        raise GridMismatch("operands have different channel counts")
    if len(a) == 0:
        return SparseScaffold(b.grid, b.keys.copy(), b.feats.copy(),
                              b.counts.copy(), b.centroid_sums.copy())
    if len(b) == 0:
        return SparseScaffold(a.grid, a.keys.copy(), a.feats.copy(),
                              a.counts.copy(), a.centroid_sums.copy())
    fa = a.grid.flatten_keys(a.keys)
    fb = b.grid.flatten_keys(b.keys)
    uniq = np.union1d(fa, fb)
    n = uniq.shape[0]
    feats = np.zeros((n, a.n_channels))
    counts = np.zeros(n, dtype=np.int64)
    sums = np.zeros((n, 3))
    ia = np.searchsorted(uniq, fa)
    ib = np.searchsorted(uniq, fb)
    feats[ia] += a.feats
    counts[ia] += a.counts
    sums[ia] += a.centroid_sums
    feats[ib] += b.feats
    counts[ib] += b.counts
    sums[ib] += b.centroid_sums
    keys = np.empty((n, 3), dtype=np.int32)
    d = a.grid.dims
    keys[:, 0] = uniq // (d[1] * d[2])
    keys[:, 1] = (uniq // d[2]) % d[1]
    keys[:, 2] = uniq % d[2]
    return SparseScaffold(a.grid, keys, feats, counts, sums)


def temporal_fuse(
    current: SparseScaffold,
    prev_fused: SparseScaffold | None,
    T_prev_to_cur: Pose,
    emb: TimeEmbedding,
    refine: SparseConvNet,
) -> SparseScaffold:
    """Merge the current spatial scaffold with the warped previous fused one.

    Age embeddings are added after warping, immediately before the sparse
    addition; the caller caches the returned scaffold as the next frame's
    previous-fused input.
    """
    if emb.table.shape[1] != current.n_channels:
        raise ChannelMismatch("embedding width must match scaffold channels")
    tagged_cur = current.with_feats(current.feats + emb.table[0])
    if prev_fused is None or len(prev_fused) == 0:
        merged = sparse_add(tagged_cur, SparseScaffold.empty(current.grid, current.n_channels))
    else:
        if prev_fused.n_channels != current.n_channels:
            raise ChannelMismatch("previous fused scaffold has different channels")
        warped = warp_scaffold(prev_fused, T_prev_to_cur, current.grid)
        tagged_prev = warped.with_feats(warped.feats + emb.table[1])
        merged = sparse_add(tagged_cur, tagged_prev)
    return sparse_conv_forward(refine, merged)
