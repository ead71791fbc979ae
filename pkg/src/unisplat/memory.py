"""Persistent static-Gaussian memory with frustum-based view filtering.

The bank is anchored in a fixed world frame (the first frame's ego frame) so
accumulation does not compound per-frame transform error. Per frame: filter
out members visible from the current rig, complete the current reconstruction
with the survivors, then append the current frame's static primitives
(dynamic score strictly below the threshold).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .gaussians import GaussianSet, SOURCE_MEMORY, concat_sets, load_ply, save_ply
from .geom import CameraModel, Pose, in_frustum_any, invert, transform_points

DEFAULT_CAPACITY = 2_000_000
WORLD_FRAME = -1


@dataclass
class MemoryBank:
    gaussians: GaussianSet = field(default_factory=lambda: GaussianSet.empty(WORLD_FRAME))
    world_from_ego_last: Pose = field(default_factory=Pose.identity)
    capacity: int = DEFAULT_CAPACITY
    frame_counter: int = 0
    insert_frame: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        if self.insert_frame.shape[0] != len(self.gaussians):
            raise ValueError("insert_frame must align with the gaussian set")

    def __len__(self) -> int:
        return len(self.gaussians)


def view_filter(m: MemoryBank, cams: list[CameraModel], world_from_ego: Pose) -> MemoryBank:
    """Keep exactly the members invisible from every camera of the current rig."""
    if len(m) == 0:
        return MemoryBank(m.gaussians.copy(), world_from_ego, m.capacity,
                          m.frame_counter, m.insert_frame.copy())
    ego_from_world = invert(world_from_ego)
    pts_ego = transform_points(ego_from_world, m.gaussians.means)
    visible = in_frustum_any(cams, pts_ego)
    keep = ~visible
    return MemoryBank(m.gaussians.select(keep), world_from_ego, m.capacity,
                      m.frame_counter, m.insert_frame[keep])


def complete(current: GaussianSet, filtered: MemoryBank, world_from_ego: Pose) -> GaussianSet:
    """Current set plus the filtered memory expressed in the current ego frame."""
    if len(filtered) == 0:
        return current.copy()
    ego_from_world = invert(world_from_ego)
    mem = filtered.gaussians.transformed(ego_from_world, frame=current.frame)
    mem.sources = np.full(len(mem), SOURCE_MEMORY, dtype=np.uint8)
    return concat_sets([current, mem], frame=current.frame)


def update(filtered: MemoryBank, current: GaussianSet, world_from_ego: Pose,
           tau_d: float = 0.2) -> MemoryBank:
    """Append the current frame's static primitives (d < tau_d) in world
    coordinates. Over capacity, evict lowest opacity first (ties: older
    insertion then lower index)."""
    if not (0.0 < tau_d < 1.0):
        raise ValueError("tau_d must lie in (0, 1)")
    static = current.select(current.dynamics < tau_d)
    new_frame = filtered.frame_counter + 1
    added = static.transformed(world_from_ego, frame=WORLD_FRAME)
    gaussians = concat_sets([filtered.gaussians, added], frame=WORLD_FRAME)
    insert_frame = np.concatenate(
        [filtered.insert_frame, np.full(len(added), new_frame, dtype=np.int64)]
    )
    if len(gaussians) > filtered.capacity:
        # eviction order: opacity asc, then insertion frame asc, then index asc
        order = np.lexsort(
            (np.arange(len(gaussians)), insert_frame, gaussians.opacities)
        )
        keep = np.sort(order[len(gaussians) - filtered.capacity:])
        gaussians = gaussians.select(keep)
        insert_frame = insert_frame[keep]
    return MemoryBank(gaussians, world_from_ego, filtered.capacity, new_frame, insert_frame)


# ---------------------------------------------------------------------------
# Checkpointing: gaussians as PLY plus a JSON sidecar with the anchoring pose
# and frame counter.
# ---------------------------------------------------------------------------

def save_memory(m: MemoryBank, ply_path, sidecar_path) -> None:
    save_ply(m.gaussians, ply_path)
    meta = {
        "world_from_ego_last": {
            "rotation": m.world_from_ego_last.rotation.tolist(),
            "translation": m.world_from_ego_last.translation.tolist(),
        },
        "frame_counter": m.frame_counter,
        "capacity": m.capacity,
        "insert_frame": m.insert_frame.tolist(),
    }
    with open(sidecar_path, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_memory(ply_path, sidecar_path) -> MemoryBank:
    gaussians = load_ply(ply_path, frame=WORLD_FRAME)
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    pose = Pose(
        np.array(meta["world_from_ego_last"]["rotation"]),
        np.array(meta["world_from_ego_last"]["translation"]),
    )
    return MemoryBank(
        gaussians, pose, int(meta["capacity"]), int(meta["frame_counter"]),
        np.asarray(meta["insert_frame"], dtype=np.int64),
    )
