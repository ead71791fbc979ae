"""Rigid transforms, pinhole cameras, projection and frustum tests.

Conventions, fixed once for the whole package:
  - image origin at the top-left corner, u along width, v along height;
  - pixel (ix, iy) covers [ix, ix+1) x [iy, iy+1), its center is at +0.5;
  - camera frame: x right, y down, z forward (optical axis);
  - a projection is valid when depth > NEAR_PLANE and (u, v) lands inside
    [0, width) x [0, height).

All types are immutable after construction and every operation is pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEAR_PLANE = 0.01

_ORTHO_TOL = 1e-9


def _as_f64(a, shape) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64).reshape(shape)
    out = np.ascontiguousarray(out)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_f64(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _as_f64(self.translation, (3,)))
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > _ORTHO_TOL:
            raise ValueError(f"rotation determinant {det} is not +1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_quat(quat, translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Build from a (w, x, y, z) quaternion; normalizes first."""
        return Pose(quat_to_matrix(np.asarray(quat, dtype=np.float64)), translation)

    @staticmethod
    def from_axis_angle(axis, angle_rad: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Rotation of angle_rad about axis (normalized first)."""
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n == 0.0:
            raise ValueError("axis must be nonzero")
        axis = axis / n
        w = np.cos(angle_rad / 2.0)
        xyz = axis * np.sin(angle_rad / 2.0)
        return Pose.from_quat(np.concatenate([[w], xyz]), translation)


def compose(a: Pose, b: Pose) -> Pose:
    """Transform applying b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -(rt @ p.translation))


def transform_points(p: Pose, pts: np.ndarray) -> np.ndarray:
    """Apply p to an (..., 3) array of points."""
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ p.rotation.T + p.translation


# ---------------------------------------------------------------------------
# Quaternions (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("zero quaternion")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to (w, x, y, z) unit quaternion, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b; supports (..., 4) broadcasting."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_from_ego: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")


def project_points(cam: CameraModel, pts_ego: np.ndarray):
    """Project (N, 3) ego-frame points.

    Returns (uv (N, 2), depth (N,), valid (N,)). uv/depth are meaningful
    only where valid.
    """
    pts_ego = np.atleast_2d(np.asarray(pts_ego, dtype=np.float64))
    pc = transform_points(cam.cam_from_ego, pts_ego)
    z = pc[:, 2]
    in_front = z > NEAR_PLANE
    zs = np.where(in_front, z, 1.0)  # avoid divide-by-zero on culled points
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    valid = in_front & (u >= 0.0) & (u < cam.width) & (v >= 0.0) & (v < cam.height)
    return np.stack([u, v], axis=1), z, valid


def project(cam: CameraModel, pt_ego) -> tuple[float, float, float] | None:
    """Single-point projection; None when behind the near plane or off-image."""
    uv, z, valid = project_points(cam, np.asarray(pt_ego, dtype=np.float64).reshape(1, 3))
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def in_frustum_any(cams: list[CameraModel], pts_ego: np.ndarray) -> np.ndarray:
    """Boolean per point: visible in at least one camera."""
    if not cams:
        raise ValueError("camera list must be nonempty")
    pts_ego = np.atleast_2d(np.asarray(pts_ego, dtype=np.float64))
    vis = np.zeros(pts_ego.shape[0], dtype=bool)
    for cam in cams:
        _, _, valid = project_points(cam, pts_ego)
        vis |= valid
    return vis


def in_frustum(cams: list[CameraModel], pt_ego) -> bool:
    return bool(in_frustum_any(cams, np.asarray(pt_ego, dtype=np.float64).reshape(1, 3))[0])


# ---------------------------------------------------------------------------
# Voxel grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned voxel grid over [p_min, p_max) with per-axis voxel size."""

    p_min: np.ndarray
    p_max: np.ndarray
    voxel_size: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p_min", _as_f64(self.p_min, (3,)))
        object.__setattr__(self, "p_max", _as_f64(self.p_max, (3,)))
        object.__setattr__(self, "voxel_size", _as_f64(self.voxel_size, (3,)))
        if not np.all(self.p_min < self.p_max):
            raise ValueError("p_min must be < p_max component-wise")
        if not np.all(self.voxel_size > 0):
            raise ValueError("voxel_size must be positive")
        dims = self.dims
        if np.any(dims > np.iinfo(np.int32).max):
            raise ValueError("grid dimensions exceed 32-bit per axis")
        if int(dims[0]) * int(dims[1]) * int(dims[2]) >= np.iinfo(np.int64).max:
            raise ValueError("total voxel count overflows flat 64-bit indexing")

    @property
    def dims(self) -> np.ndarray:
        return np.ceil((self.p_max - self.p_min) / self.voxel_size).astype(np.int64)

    def point_to_key(self, pts: np.ndarray):
        """(keys (N, 3) int32, in_bounds (N,)) for (N, 3) points; floor indexing."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        in_bounds = np.all(pts >= self.p_min, axis=1) & np.all(pts < self.p_max, axis=1)
        rel = np.floor((pts - self.p_min) / self.voxel_size)
        keys = np.clip(rel, 0, self.dims - 1).astype(np.int32)
        return keys, in_bounds

    def key_to_center(self, keys: np.ndarray) -> np.ndarray:
        keys = np.atleast_2d(np.asarray(keys))
        return self.p_min + (keys.astype(np.float64) + 0.5) * self.voxel_size

    def flatten_keys(self, keys: np.ndarray) -> np.ndarray:
        """Lexicographic flat index; preserves (ix, iy, iz) sort order."""
        keys = np.atleast_2d(np.asarray(keys)).astype(np.int64)
        d = self.dims
        return (keys[:, 0] * d[1] + keys[:, 1]) * d[2] + keys[:, 2]

    def same_as(self, other: "GridSpec") -> bool:
        return (
            np.array_equal(self.p_min, other.p_min)
            and np.array_equal(self.p_max, other.p_max)
            and np.array_equal(self.voxel_size, other.voxel_size)
        )
