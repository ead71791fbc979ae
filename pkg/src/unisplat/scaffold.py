"""Sparse latent voxel scaffold: voxelize point maps, attach multi-view
features to occupied voxels, and retrieve features for arbitrary 3D points.

Storage is struct-of-arrays, sorted by lexicographic voxel key so every
iteration order (and therefore every floating-point reduction order) is
reproducible. Centroids are kept as coordinate sums next to the point count,
which makes merging scaffolds exact whenever the inputs are exactly
representable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .geom import CameraModel, GridSpec, project_points

# Channels of the initial voxel feature: centroid offset from the voxel
# center (3) plus log1p of the point count (1).
INIT_FEATURE_DIM = 4

_DUMP_MAGIC = b"USCF"
_DUMP_VERSION = 1


@dataclass(frozen=True)
class PointMapFrame:
    """Per-camera dense point grids with validity masks.

    points: (n_cam, H, W, 3) ego-frame meters; valid: (n_cam, H, W) bool.
    Invalid entries are excluded from every aggregation.
    """

    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.points.ndim != 4 or self.points.shape[-1] != 3:
            raise ShapeMismatch(f"points must be (n_cam, H, W, 3), got {self.points.shape}")
        if self.valid.shape != self.points.shape[:3]:
            raise ShapeMismatch("valid mask must match points grid")

    @property
    def n_cameras(self) -> int:
        return self.points.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        """(width, height) of the pixel grid."""
        return self.points.shape[2], self.points.shape[1]

    def valid_points(self):
        """(pts (M, 3), cam_idx (M,), iy (M,), ix (M,)) over valid entries,
        in (camera, row, column) scan order."""
        cam, iy, ix = np.nonzero(self.valid)
        return self.points[cam, iy, ix], cam, iy, ix


@dataclass(frozen=True)
class FeatureMapSet:
    """Per-camera feature grids (n_cam, H_f, W_f, C); the first c_geo channels
    are the geometry block, the rest the semantic block."""

    features: np.ndarray
    c_geo: int

    def __post_init__(self):
        if self.features.ndim != 4:
            raise ShapeMismatch(f"features must be (n_cam, H_f, W_f, C), got {self.features.shape}")
        if not (0 <= self.c_geo <= self.features.shape[-1]):
            raise ShapeMismatch("c_geo out of range")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("feature maps must be finite")

    @property
    def n_channels(self) -> int:
        return self.features.shape[-1]

    @property
    def geo(self) -> np.ndarray:
        return self.features[..., : self.c_geo]


@dataclass
class SparseScaffold:
    """Occupied voxels with latent features and explicit positions.

    keys:          (N, 3) int32, sorted lexicographically, unique
    feats:         (N, C) float64
    counts:        (N,) int64 contributing-point counts
    centroid_sums: (N, 3) float64 sums of member coordinates (centroid * count)
    """

    grid: GridSpec
    keys: np.ndarray
    feats: np.ndarray
    counts: np.ndarray
    centroid_sums: np.ndarray

    def __post_init__(self):
        n = self.keys.shape[0]
        if self.keys.shape != (n, 3) or self.feats.shape[0] != n:
            raise ShapeMismatch("inconsistent scaffold arrays")
        if self.counts.shape != (n,) or self.centroid_sums.shape != (n, 3):
            raise ShapeMismatch("inconsistent scaffold arrays")
        self._flat = self.grid.flatten_keys(self.keys) if n else np.empty(0, dtype=np.int64)

    @staticmethod
    def empty(grid: GridSpec, n_channels: int) -> "SparseScaffold":
        return SparseScaffold(
            grid=grid,
            keys=np.empty((0, 3), dtype=np.int32),
            feats=np.empty((0, n_channels)),
            counts=np.empty(0, dtype=np.int64),
            centroid_sums=np.empty((0, 3)),
        )

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def n_channels(self) -> int:
        return self.feats.shape[1]

    @property
    def positions(self) -> np.ndarray:
        """Geometric centers of the occupied voxels."""
        return self.grid.key_to_center(self.keys).reshape(-1, 3)

    @property
    def centroids(self) -> np.ndarray:
        return self.centroid_sums / self.counts[:, None]

    def lookup(self, pts: np.ndarray) -> np.ndarray:
        """Entry index of the voxel containing each point, -1 when the point
        is out of bounds or its voxel is unoccupied."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        keys, in_bounds = self.grid.point_to_key(pts)
        out = np.full(pts.shape[0], -1, dtype=np.int64)
        if len(self) == 0 or not in_bounds.any():
            return out
        flat = self.grid.flatten_keys(keys[in_bounds])
        pos = np.searchsorted(self._flat, flat)
        pos = np.clip(pos, 0, len(self) - 1)
        hit = self._flat[pos] == flat
        idx = np.where(hit, pos, -1)
        out[in_bounds] = idx
        return out

    def with_feats(self, feats: np.ndarray) -> "SparseScaffold":
        if feats.shape[0] != len(self):
            raise ShapeMismatch("feature rows must match entry count")
        return SparseScaffold(self.grid, self.keys, feats, self.counts, self.centroid_sums)


def voxelize(points: PointMapFrame, grid: GridSpec) -> SparseScaffold:
    """Group valid in-bounds points into voxels.

    Each occupied voxel stores the member-point count, the coordinate sums
    (mean = centroid), and an initial feature [centroid - center, log1p(count)].
    Out-of-bounds points are dropped.
    """
    pts, _, _, _ = points.valid_points()
    keys, in_bounds = grid.point_to_key(pts)
    pts, keys = pts[in_bounds], keys[in_bounds]
    if pts.shape[0] == 0:
        return SparseScaffold.empty(grid, INIT_FEATURE_DIM)
    flat = grid.flatten_keys(keys)
    uniq, inverse = np.unique(flat, return_inverse=True)
    n = uniq.shape[0]
    counts = np.bincount(inverse, minlength=n).astype(np.int64)
    sums = np.zeros((n, 3))
    for axis in range(3):
        sums[:, axis] = np.bincount(inverse, weights=pts[:, axis], minlength=n)
    d = grid.dims
    ukeys = np.empty((n, 3), dtype=np.int32)
    ukeys[:, 0] = uniq // (d[1] * d[2])
    ukeys[:, 1] = (uniq // d[2]) % d[1]
    ukeys[:, 2] = uniq % d[2]
    centers = grid.key_to_center(ukeys)
    feats = np.concatenate(
        [sums / counts[:, None] - centers, np.log1p(counts)[:, None]], axis=1
    )
    return SparseScaffold(grid, ukeys, feats, counts, sums)


def bilinear_sample(
    feature_map: np.ndarray, uv: np.ndarray, image_size: tuple[int, int]
) -> np.ndarray:
    """Sample (H_f, W_f, C) at image-space (u, v) points.

    Image coordinates span [0, width) x [0, height) and are rescaled to the
    feature grid; texel centers sit at integer + 0.5 and borders clamp.
    """
    hf, wf, _ = feature_map.shape
    w_img, h_img = image_size
    u = np.asarray(uv, dtype=np.float64)[:, 0] * (wf / w_img)
    v = np.asarray(uv, dtype=np.float64)[:, 1] * (hf / h_img)
    x = u - 0.5
    y = v - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0i = np.clip(x0.astype(np.int64), 0, wf - 1)
    x1i = np.clip(x0.astype(np.int64) + 1, 0, wf - 1)
    y0i = np.clip(y0.astype(np.int64), 0, hf - 1)
    y1i = np.clip(y0.astype(np.int64) + 1, 0, hf - 1)
    w00 = ((1 - fx) * (1 - fy))[:, None]
    w10 = (fx * (1 - fy))[:, None]
    w01 = ((1 - fx) * fy)[:, None]
    w11 = (fx * fy)[:, None]
    return (
        w00 * feature_map[y0i, x0i]
        + w10 * feature_map[y0i, x1i]
        + w01 * feature_map[y1i, x0i]
        + w11 * feature_map[y1i, x1i]
    )


def attach_view_features(
    s: SparseScaffold,
    cams: list[CameraModel],
    feats: FeatureMapSet,
) -> SparseScaffold:
    """Project each voxel center into every camera, bilinearly sample the
    feature maps where the projection lands in-image, and average over those
    cameras. Voxels visible nowhere get a zero sampled block. The output
    feature is [sampled || initial]."""
    if len(cams) != feats.features.shape[0]:
        raise ShapeMismatch("one feature map per camera required")
    centers = s.positions
    c = feats.n_channels
    acc = np.zeros((len(s), c))
    n_vis = np.zeros(len(s))
    for k, cam in enumerate(cams):
        uv, _, valid = project_points(cam, centers)
        if valid.any():
            acc[valid] += bilinear_sample(
                feats.features[k], uv[valid], (cam.width, cam.height)
            )
            n_vis[valid] += 1.0
    vis = n_vis > 0
    sampled = np.zeros_like(acc)
    sampled[vis] = acc[vis] / n_vis[vis, None]
    return s.with_feats(np.concatenate([sampled, s.feats], axis=1))


def retrieve(s: SparseScaffold, pt: np.ndarray) -> np.ndarray:
    """Feature of the voxel containing pt; zeros when out of bounds or empty."""
    return retrieve_many(s, np.asarray(pt, dtype=np.float64).reshape(1, 3))[0]


def retrieve_many(s: SparseScaffold, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    idx = s.lookup(pts)
    out = np.zeros((pts.shape[0], s.n_channels))
    hit = idx >= 0
    out[hit] = s.feats[idx[hit]]
    return out


def occupancy(s: SparseScaffold):
    """(entry count, (min_center, max_center)) — bounds None when empty."""
    if len(s) == 0:
        return 0, None
    centers = s.positions
    return len(s), (centers.min(axis=0), centers.max(axis=0))


# ---------------------------------------------------------------------------
# Debug dump: header (magic, version u32, N_v u64, C_s u32, grid 9 f64 LE)
# then per entry: key 3xi32, centroid 3xf64, count u32, feature C_s x f32.
# ---------------------------------------------------------------------------

def dump_scaffold(s: SparseScaffold, path) -> None:
    grid9 = np.concatenate([s.grid.p_min, s.grid.p_max, s.grid.voxel_size])
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack("<IQI", _DUMP_VERSION, len(s), s.n_channels))
        fh.write(grid9.astype("<f8").tobytes())
        centroids = s.centroids if len(s) else np.empty((0, 3))
        for i in range(len(s)):
            fh.write(s.keys[i].astype("<i4").tobytes())
            fh.write(centroids[i].astype("<f8").tobytes())
            fh.write(struct.pack("<I", int(s.counts[i])))
            fh.write(s.feats[i].astype("<f4").tobytes())


def load_scaffold(path) -> SparseScaffold:
    with open(path, "rb") as fh:
        if fh.read(4) != _DUMP_MAGIC:
            raise ValueError("not a scaffold dump")
        version, n, c = struct.unpack("<IQI", fh.read(16))
        if version != _DUMP_VERSION:
            raise ValueError(f"unsupported dump version {version}")
        grid9 = np.frombuffer(fh.read(72), dtype="<f8")
        grid = GridSpec(grid9[0:3], grid9[3:6], grid9[6:9])
        keys = np.empty((n, 3), dtype=np.int32)
        feats = np.empty((n, c))
        counts = np.empty(n, dtype=np.int64)
        sums = np.empty((n, 3))
        for i in range(n):
            keys[i] = np.frombuffer(fh.read(12), dtype="<i4")
            centroid = np.frombuffer(fh.read(24), dtype="<f8")
            (counts[i],) = struct.unpack("<I", fh.read(4))
            feats[i] = np.frombuffer(fh.read(4 * c), dtype="<f4")
            sums[i] = centroid * counts[i]
    return SparseScaffold(grid, keys, feats, counts, sums)


def scaffold_state_equal(a: SparseScaffold, b: SparseScaffold) -> bool:
    """Bitwise state equality (used by identity/determinism tests)."""
    return (
        a.grid.same_as(b.grid)
        and np.array_equal(a.keys, b.keys)
        and np.array_equal(a.feats, b.feats)
        and np.array_equal(a.counts, b.counts)
        and np.array_equal(a.centroid_sums, b.centroid_sums)
    )
