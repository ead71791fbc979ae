"""Renderable Gaussian primitives and their PLY-compatible export.

A set is stored struct-of-arrays; GaussianPrimitive is a scalar view for
single-primitive construction and inspection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .geom import Pose, quat_multiply, quat_normalize, matrix_to_quat, transform_points

SOURCE_POINT = 0
SOURCE_VOXEL = 1
SOURCE_MEMORY = 2

SOURCE_NAMES = {SOURCE_POINT: "point", SOURCE_VOXEL: "voxel", SOURCE_MEMORY: "memory"}

_QUAT_TOL = 1e-6


@dataclass(frozen=True)
class GaussianPrimitive:
    mean: np.ndarray          # (3,) meters
    opacity: float            # [0, 1]
    scale: np.ndarray         # (3,) positive std-devs, meters
    rotation: np.ndarray      # (4,) unit quaternion (w, x, y, z)
    color: np.ndarray         # (3,) in [0, 1]
    dynamic_score: float      # [0, 1]
    source: int = SOURCE_POINT

    def __post_init__(self):
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("opacity out of [0, 1]")
        if not np.all(np.asarray(self.scale) > 0):
            raise ValueError("scale must be positive")
        if abs(np.linalg.norm(self.rotation) - 1.0) > _QUAT_TOL:
            raise ValueError("rotation must be a unit quaternion")
        if not (0.0 <= self.dynamic_score <= 1.0):
            raise ValueError("dynamic score out of [0, 1]")
        c = np.asarray(self.color)
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError("color out of [0, 1]")


@dataclass
class GaussianSet:
    """Struct-of-arrays collection of primitives, tagged with the ego
    timestep it is expressed in (-1 for the world frame)."""

    means: np.ndarray       # (N, 3)
    opacities: np.ndarray   # (N,)
    scales: np.ndarray      # (N, 3)
    rotations: np.ndarray   # (N, 4)
    colors: np.ndarray      # (N, 3)
    dynamics: np.ndarray    # (N,)
    sources: np.ndarray     # (N,) uint8
    frame: int = 0

    def __post_init__(self):
        n = self.means.shape[0]
        shapes = {
            "means": (n, 3), "opacities": (n,), "scales": (n, 3),
            "rotations": (n, 4), "colors": (n, 3), "dynamics": (n,), "sources": (n,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(f"{name} must have shape {shape}")

    @staticmethod
    def empty(frame: int = 0) -> "GaussianSet":
        return GaussianSet(
            means=np.empty((0, 3)), opacities=np.empty(0), scales=np.empty((0, 3)),
            rotations=np.empty((0, 4)), colors=np.empty((0, 3)), dynamics=np.empty(0),
            sources=np.empty(0, dtype=np.uint8), frame=frame,
        )

    @staticmethod
    def from_primitives(prims: list[GaussianPrimitive], frame: int = 0) -> "GaussianSet":
        if not prims:
            return GaussianSet.empty(frame)
        return GaussianSet(
            means=np.array([p.mean for p in prims], dtype=np.float64).reshape(-1, 3),
            opacities=np.array([p.opacity for p in prims], dtype=np.float64),
            scales=np.array([p.scale for p in prims], dtype=np.float64).reshape(-1, 3),
            rotations=np.array([p.rotation for p in prims], dtype=np.float64).reshape(-1, 4),
            colors=np.array([p.color for p in prims], dtype=np.float64).reshape(-1, 3),
            dynamics=np.array([p.dynamic_score for p in prims], dtype=np.float64),
            sources=np.array([p.source for p in prims], dtype=np.uint8),
            frame=frame,
        )

    def __len__(self) -> int:
        return self.means.shape[0]

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mean=self.means[i].copy(), opacity=float(self.opacities[i]),
            scale=self.scales[i].copy(), rotation=self.rotations[i].copy(),
            color=self.colors[i].copy(), dynamic_score=float(self.dynamics[i]),
            source=int(self.sources[i]),
        )

    def select(self, mask_or_idx) -> "GaussianSet":
        return GaussianSet(
            means=self.means[mask_or_idx], opacities=self.opacities[mask_or_idx],
            scales=self.scales[mask_or_idx], rotations=self.rotations[mask_or_idx],
            colors=self.colors[mask_or_idx], dynamics=self.dynamics[mask_or_idx],
            sources=self.sources[mask_or_idx], frame=self.frame,
        )

    def copy(self) -> "GaussianSet":
        return self.select(slice(None))

    def transformed(self, pose: Pose, frame: int | None = None) -> "GaussianSet":
        """Rigidly move every primitive; quaternions are left-multiplied by
        the pose rotation, scales are untouched."""
        out = self.copy()
        out.means = transform_points(pose, self.means)
        if len(self):
            q_rel = matrix_to_quat(pose.rotation)
            out.rotations = quat_normalize(quat_multiply(q_rel, self.rotations))
        out.frame = self.frame if frame is None else frame
        return out

    def covariances(self) -> np.ndarray:
        """(N, 3, 3) covariance matrices R diag(s^2) R^T."""
        w, x, y, z = self.rotations.T
        R = np.empty((len(self), 3, 3))
        R[:, 0, 0] = 1 - 2 * (y * y + z * z)
        R[:, 0, 1] = 2 * (x * y - w * z)
        R[:, 0, 2] = 2 * (x * z + w * y)
        R[:, 1, 0] = 2 * (x * y + w * z)
        R[:, 1, 1] = 1 - 2 * (x * x + z * z)
        R[:, 1, 2] = 2 * (y * z - w * x)
        R[:, 2, 0] = 2 * (x * z - w * y)
        R[:, 2, 1] = 2 * (y * z + w * x)
        R[:, 2, 2] = 1 - 2 * (x * x + y * y)
        S2 = self.scales**2
        return np.einsum("nij,nj,nkj->nik", R, S2, R)


def concat_sets(sets: list[GaussianSet], frame: int | None = None) -> GaussianSet:
    sets = [s for s in sets]
    if not sets:
        return GaussianSet.empty(0 if frame is None else frame)
    out = GaussianSet(
        means=np.concatenate([s.means for s in sets]),
        opacities=np.concatenate([s.opacities for s in sets]),
        scales=np.concatenate([s.scales for s in sets]),
        rotations=np.concatenate([s.rotations for s in sets]),
        colors=np.concatenate([s.colors for s in sets]),
        dynamics=np.concatenate([s.dynamics for s in sets]),
        sources=np.concatenate([s.sources for s in sets]),
        frame=sets[0].frame if frame is None else frame,
    )
    return out


# ---------------------------------------------------------------------------
# PLY export: binary little-endian vertices with extra float properties so
# external viewers can read positions/colors directly.
# ---------------------------------------------------------------------------

_PLY_PROPS = [
    "x", "y", "z", "red", "green", "blue",
    "opacity", "scale_x", "scale_y", "scale_z",
    "rot_w", "rot_x", "rot_y", "rot_z", "dyn", "source",
]


def save_ply(gs: GaussianSet, path) -> None:
    n = len(gs)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in _PLY_PROPS]
    header += ["end_header", ""]
    rec = np.empty((n, len(_PLY_PROPS)), dtype="<f4")
    rec[:, 0:3] = gs.means
    rec[:, 3:6] = gs.colors
    rec[:, 6] = gs.opacities
    rec[:, 7:10] = gs.scales
    rec[:, 10:14] = gs.rotations
    rec[:, 14] = gs.dynamics
    rec[:, 15] = gs.sources
    with open(path, "wb") as fh:
        fh.write("\n".join(header).encode("ascii"))
        fh.write(rec.tobytes())


def load_ply(path, frame: int = 0) -> GaussianSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.index(b"end_header\n") + len(b"end_header\n")
    header = blob[:end].decode("ascii").splitlines()
    n = 0
    props = []
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property float"):
            props.append(line.split()[-1])
    if props != _PLY_PROPS:
        raise ValueError("unexpected PLY property layout")
    rec = np.frombuffer(blob[end:], dtype="<f4").reshape(n, len(_PLY_PROPS)).astype(np.float64)
    rot = rec[:, 10:14]
    norms = np.linalg.norm(rot, axis=1, keepdims=True)
    rot = np.where(norms > 0, rot / np.where(norms > 0, norms, 1.0), [[1.0, 0, 0, 0]])
    return GaussianSet(
        means=rec[:, 0:3].copy(), opacities=np.clip(rec[:, 6], 0.0, 1.0),
        scales=np.maximum(rec[:, 7:10], 1e-9), rotations=rot,
        colors=np.clip(rec[:, 3:6], 0.0, 1.0), dynamics=np.clip(rec[:, 14], 0.0, 1.0),
        sources=rec[:, 15].astype(np.uint8), frame=frame,
    )
