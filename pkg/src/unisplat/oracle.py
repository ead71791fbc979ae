"""Deterministic synthetic world and sensor oracle.

Generates everything a frame step consumes: ray-cast per-pixel 3D points
with validity, shaded ground-truth images, dynamic-object masks, per-camera
scale-corrupted point maps (divide by the true factor, so applying it
restores metric geometry), pose trajectories, procedural feature maps
(positional encoding of the true point plus albedo) and scale references.

Everything is a pure function of (scene, timestep); frames are bit
reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import InsufficientValidPixels
from .geom import CameraModel, Pose, compose, invert, transform_points
from .losses import SupervisionTargets
from .scaffold import FeatureMapSet, PointMapFrame
from .scale import ScaleReference

PE_BANDS = 8
PE_BASE_WAVELENGTH = 32.0  # meters; band k has frequency pi * 2^k / this
FEATURE_CHANNELS = PE_BANDS * 2 * 3 + 3  # encoding + albedo
C_GEO = PE_BANDS * 2 * 3


@dataclass(frozen=True)
class BoxSpec:
    center: np.ndarray
    size: np.ndarray
    color: np.ndarray
    velocity: np.ndarray  # meters per frame; nonzero => dynamic

    @property
    def dynamic(self) -> bool:
        return bool(np.any(self.velocity != 0.0))


@dataclass(frozen=True)
class SphereSpec:
    center: np.ndarray
    radius: float
    color: np.ndarray


@dataclass
class SyntheticScene:
    seed: int
    cameras: list[CameraModel]
    ego_start: np.ndarray
    ego_step: np.ndarray
    n_frames: int
    ground_z: float = -1.5
    ground_colors: np.ndarray = field(
        default_factory=lambda: np.array([[0.25, 0.3, 0.25], [0.65, 0.6, 0.55]])
    )
    ground_period: float = 2.0
    boxes: list[BoxSpec] = field(default_factory=list)
    spheres: list[SphereSpec] = field(default_factory=list)
    sky_color: np.ndarray = field(default_factory=lambda: np.array([0.35, 0.5, 0.75]))
    sun_direction: np.ndarray = field(default_factory=lambda: np.array([0.4, -0.3, 0.85]))
    ambient: float = 0.55
    gamma_true: np.ndarray | None = None
    scale_corruption: bool = False
    n_scale_pairs: int = 256
    feature_downsample: int = 1

    def __post_init__(self):
        if self.gamma_true is None:
            self.gamma_true = np.ones(len(self.cameras))
        self.gamma_true = np.asarray(self.gamma_true, dtype=np.float64)
        if self.gamma_true.shape != (len(self.cameras),):
            raise ValueError("gamma_true must have one entry per camera")
        self.sun_direction = np.asarray(self.sun_direction, dtype=np.float64)
        self.sun_direction = self.sun_direction / np.linalg.norm(self.sun_direction)

    def world_from_ego(self, t: int) -> Pose:
        return Pose(np.eye(3), self.ego_start + self.ego_step * t)


@dataclass
class FrameBundle:
    timestep: int
    cameras: list[CameraModel]
    world_from_ego: Pose
    images: np.ndarray             # (n_cam, H, W, 3)
    point_map: PointMapFrame       # scale-corrupted when enabled
    true_points: np.ndarray        # (n_cam, H, W, 3) metric ego-frame points
    features: FeatureMapSet
    dynamic_masks: np.ndarray      # (n_cam, H, W) bool
    targets: list[SupervisionTargets]
    scale_reference: ScaleReference | None
    gamma_true: np.ndarray


def make_camera(yaw_deg: float, width: int = 96, height: int = 64,
                hfov_deg: float = 60.0, position=(0.0, 0.0, 0.0)) -> CameraModel:
    """Forward-facing rig camera rotated by yaw about ego +z.

    Ego frame: x forward, y left, z up. Camera frame: x right, y down,
    z optical axis.
    """
    fx = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    yaw = math.radians(yaw_deg)
    rotz = np.array(
        [[math.cos(yaw), -math.sin(yaw), 0.0], [math.sin(yaw), math.cos(yaw), 0.0], [0.0, 0.0, 1.0]]
    )
    ego_from_cam = Pose(rotz @ base, np.asarray(position, dtype=np.float64))
    return CameraModel(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                       width=width, height=height, cam_from_ego=invert(ego_from_cam))


def default_scene(seed: int = 7, n_frames: int = 8, width: int = 96, height: int = 64,
                  dynamic: bool = True) -> SyntheticScene:
    """Three-camera rig driving forward past boxes and spheres; optionally one
    box crossing laterally through the corridor."""
    cams = [make_camera(yaw, width, height) for yaw in (-45.0, 0.0, 45.0)]
    boxes = [
        BoxSpec(np.array([6.0, -3.0, -0.75]), np.array([1.5, 1.5, 1.5]),
                np.array([0.75, 0.25, 0.2]), np.zeros(3)),
        BoxSpec(np.array([9.0, 3.5, -0.5]), np.array([2.0, 1.2, 2.0]),
                np.array([0.2, 0.35, 0.8]), np.zeros(3)),
        BoxSpec(np.array([13.0, -1.5, -0.9]), np.array([1.2, 2.5, 1.2]),
                np.array([0.85, 0.7, 0.2]), np.zeros(3)),
    ]
    if dynamic:
        boxes.append(
            BoxSpec(np.array([7.5, 1.8, -0.9]), np.array([1.2, 1.2, 1.2]),
                    np.array([0.9, 0.9, 0.95]), np.array([0.0, -0.5, 0.0]))
        )
    spheres = [
        SphereSpec(np.array([11.0, 1.0, -0.4]), 0.9, np.array([0.3, 0.7, 0.4])),
        SphereSpec(np.array([5.0, 4.0, -0.6]), 0.7, np.array([0.7, 0.4, 0.7])),
    ]
    return SyntheticScene(
        seed=seed, cameras=cams, ego_start=np.zeros(3),
        ego_step=np.array([1.0, 0.0, 0.0]), n_frames=n_frames,
        boxes=boxes, spheres=spheres,
    )


# ---------------------------------------------------------------------------
# Tracing
# ---------------------------------------------------------------------------

def _scene_arrays(scene: SyntheticScene, t: int):
    if scene.boxes:
        lo = np.stack([b.center + b.velocity * t - b.size / 2.0 for b in scene.boxes])
        hi = np.stack([b.center + b.velocity * t + b.size / 2.0 for b in scene.boxes])
    else:
        lo = np.empty((0, 3))
        hi = np.empty((0, 3))
    if scene.spheres:
        sc = np.stack([s.center for s in scene.spheres])
        sr = np.array([s.radius for s in scene.spheres])
    else:
        sc = np.empty((0, 3))
        sr = np.empty(0)
    return lo, hi, sc, sr


def _ray_grid(cam: CameraModel, world_from_cam: Pose, us: np.ndarray, vs: np.ndarray):
    """World-frame origin and (len(vs), len(us), 3) directions through the
    given image coordinates."""
    uu, vv = np.meshgrid(us, vs)
    d_cam = np.stack(
        [(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=2
    )
    dirs = d_cam @ world_from_cam.rotation.T
    return world_from_cam.translation, np.ascontiguousarray(dirs)


def _trace(origin, dirs, scene: SyntheticScene, t: int):
    lo, hi, sc, sr = _scene_arrays(scene, t)
    if backend.numba_active():
        from ._trace_numba import trace_kernel

        h, w = dirs.shape[:2]
        out_t = np.empty((h, w))
        out_id = np.empty((h, w), dtype=np.int32)
        trace_kernel(origin, dirs, scene.ground_z, True, lo, hi, sc, sr, out_t, out_id)
        return out_t, out_id
    from ._trace_numpy import trace

    return trace(origin, dirs, scene.ground_z, True, lo, hi, sc, sr)


def _albedo(scene: SyntheticScene, t: int, pts: np.ndarray, hit_id: np.ndarray) -> np.ndarray:
    """Unshaded surface color at world points; procedural per primitive."""
    out = np.zeros(pts.shape[:-1] + (3,))
    ground = hit_id == 0
    if ground.any():
        p = pts[ground]
        parity = (
            np.floor(p[:, 0] / scene.ground_period) + np.floor(p[:, 1] / scene.ground_period)
        ).astype(np.int64) & 1
        out[ground] = scene.ground_colors[parity]
    n_box = len(scene.boxes)
    for b, box in enumerate(scene.boxes):
        sel = hit_id == 1 + b
        if sel.any():
            p = pts[sel]
            mod = 0.8 + 0.2 * np.sin(2.0 * np.pi * (p[:, 0] + p[:, 1] + p[:, 2]))
            out[sel] = box.color * mod[:, None]
    for s, sph in enumerate(scene.spheres):
        sel = hit_id == 1 + n_box + s
        if sel.any():
            p = pts[sel]
            mod = 0.8 + 0.2 * np.sin(4.0 * (p[:, 2] - sph.center[2]) / sph.radius)
            out[sel] = sph.color * mod[:, None]
    return np.clip(out, 0.0, 1.0)


def _normals(scene: SyntheticScene, t: int, pts: np.ndarray, hit_id: np.ndarray) -> np.ndarray:
    out = np.zeros(pts.shape[:-1] + (3,))
    out[hit_id == 0] = (0.0, 0.0, 1.0)
    n_box = len(scene.boxes)
    for b, box in enumerate(scene.boxes):
        sel = hit_id == 1 + b
        if sel.any():
            center = box.center + box.velocity * t
            rel = (pts[sel] - center) / (box.size / 2.0)
            axis = np.argmax(np.abs(rel), axis=1)
            n = np.zeros((sel.sum(), 3))
            n[np.arange(len(n)), axis] = np.sign(rel[np.arange(len(n)), axis])
            out[sel] = n
    for s, sph in enumerate(scene.spheres):
        sel = hit_id == 1 + n_box + s
        if sel.any():
            out[sel] = (pts[sel] - sph.center) / sph.radius
    return out


def _shade(scene: SyntheticScene, albedo: np.ndarray, normals: np.ndarray) -> np.ndarray:
    lam = np.maximum(normals @ scene.sun_direction, 0.0)
    shade = scene.ambient + (1.0 - scene.ambient) * lam
    return np.clip(albedo * shade[..., None], 0.0, 1.0)


def _positional_encoding(pts: np.ndarray) -> np.ndarray:
    """(..., 48): sin/cos of 8 octave frequencies per axis."""
    freqs = np.pi * (2.0 ** np.arange(PE_BANDS)) / PE_BASE_WAVELENGTH
    ang = pts[..., None, :] * freqs[:, None]  # (..., bands, 3)
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)  # (..., bands, 6)
    return enc.reshape(pts.shape[:-1] + (PE_BANDS * 6,))


def raycast_frame(scene: SyntheticScene, t: int) -> FrameBundle:
    """Full sensor bundle for timestep t."""
    if not (0 <= t < scene.n_frames):
        raise ValueError(f"timestep {t} outside trajectory of {scene.n_frames} frames")
    wfe = scene.world_from_ego(t)
    efw = invert(wfe)
    n_cam = len(scene.cameras)
    h = scene.cameras[0].height
    w = scene.cameras[0].width
    fds = scene.feature_downsample
    hf, wf = h // fds, w // fds

    images = np.empty((n_cam, h, w, 3))
    points = np.zeros((n_cam, h, w, 3))
    true_points = np.zeros((n_cam, h, w, 3))
    valid = np.zeros((n_cam, h, w), dtype=bool)
    dyn_masks = np.zeros((n_cam, h, w), dtype=bool)
    feats = np.zeros((n_cam, hf, wf, FEATURE_CHANNELS))
    dynamic_ids = np.array(
        [False] + [b.dynamic for b in scene.boxes] + [False] * len(scene.spheres)
    )

    for k, cam in enumerate(scene.cameras):
        world_from_cam = compose(wfe, invert(cam.cam_from_ego))
        us = np.arange(w) + 0.5
        vs = np.arange(h) + 0.5
        origin, dirs = _ray_grid(cam, world_from_cam, us, vs)
        t_hit, hit_id = _trace(origin, dirs, scene, t)
        hit = hit_id >= 0
        pts_world = origin + t_hit[:, :, None] * dirs
        pts_world[~hit] = 0.0
        albedo = _albedo(scene, t, pts_world, hit_id)
        normals = _normals(scene, t, pts_world, hit_id)
        img = _shade(scene, albedo, normals)
        img[~hit] = scene.sky_color
        images[k] = img
        pts_ego = transform_points(efw, pts_world.reshape(-1, 3)).reshape(h, w, 3)
        pts_ego[~hit] = 0.0
        true_points[k] = pts_ego
        points[k] = pts_ego / scene.gamma_true[k] if scene.scale_corruption else pts_ego
        valid[k] = hit
        dyn_masks[k] = np.where(hit, dynamic_ids[np.maximum(hit_id, 0)], False)

        if fds == 1:
            fe_pts, fe_albedo, fe_hit = pts_ego, albedo, hit
        else:
            us_f = (np.arange(wf) + 0.5) * fds
            vs_f = (np.arange(hf) + 0.5) * fds
            origin_f, dirs_f = _ray_grid(cam, world_from_cam, us_f, vs_f)
            t_f, id_f = _trace(origin_f, dirs_f, scene, t)
            fe_hit = id_f >= 0
            pw = origin_f + t_f[:, :, None] * dirs_f
            pw[~fe_hit] = 0.0
            fe_albedo = _albedo(scene, t, pw, id_f)
            fe_pts = transform_points(efw, pw.reshape(-1, 3)).reshape(hf, wf, 3)
            fe_pts[~fe_hit] = 0.0
        enc = _positional_encoding(fe_pts)
        enc[~fe_hit] = 0.0
        fe_albedo = np.where(fe_hit[:, :, None], fe_albedo, 0.0)
        feats[k] = np.concatenate([enc, fe_albedo], axis=2)

    point_map = PointMapFrame(points=points, valid=valid)
    targets = [
        SupervisionTargets(
            image=images[k], dynamic_mask=dyn_masks[k],
            background_mask=~dyn_masks[k], role="input",
            gamma_target=float(scene.gamma_true[k]),
        )
        for k in range(n_cam)
    ]
    bundle = FrameBundle(
        timestep=t, cameras=list(scene.cameras), world_from_ego=wfe,
        images=images, point_map=point_map, true_points=true_points,
        features=FeatureMapSet(features=feats, c_geo=C_GEO),
        dynamic_masks=dyn_masks, targets=targets,
        scale_reference=None, gamma_true=scene.gamma_true.copy(),
    )
    bundle.scale_reference = scale_reference(bundle, scene.n_scale_pairs,
                                             seed=(scene.seed, t))
    return bundle


def scale_reference(bundle: FrameBundle, n_pairs: int, seed) -> ScaleReference:
    """Sample n_pairs valid pixels per camera, pairing the (possibly
    corrupted) predicted point with the metric point."""
    rng = np.random.default_rng(seed)
    pred, ref = [], []
    for k in range(bundle.point_map.n_cameras):
        ys, xs = np.nonzero(bundle.point_map.valid[k])
        if ys.shape[0] < n_pairs:
            raise InsufficientValidPixels(
                f"camera {k}: {ys.shape[0]} valid pixels < {n_pairs} requested"
            )
        pick = rng.choice(ys.shape[0], size=n_pairs, replace=False)
        pred.append(bundle.point_map.points[k, ys[pick], xs[pick]])
        ref.append(bundle.true_points[k, ys[pick], xs[pick]])
    return ScaleReference(pred=pred, ref=ref)


# ---------------------------------------------------------------------------
# Scene file I/O
# ---------------------------------------------------------------------------

def scene_to_dict(scene: SyntheticScene) -> dict:
    return {
        "seed": scene.seed,
        "n_frames": scene.n_frames,
        "ego_start": scene.ego_start.tolist(),
        "ego_step": scene.ego_step.tolist(),
        "ground": {
            "z": scene.ground_z,
            "colors": scene.ground_colors.tolist(),
            "period": scene.ground_period,
        },
        "sky_color": scene.sky_color.tolist(),
        "sun_direction": scene.sun_direction.tolist(),
        "ambient": scene.ambient,
        "cameras": [
            {
                "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                "width": c.width, "height": c.height,
                "cam_from_ego": {
                    "rotation": c.cam_from_ego.rotation.tolist(),
                    "translation": c.cam_from_ego.translation.tolist(),
                },
            }
            for c in scene.cameras
        ],
        "boxes": [
            {
                "center": b.center.tolist(), "size": b.size.tolist(),
                "color": b.color.tolist(), "velocity": b.velocity.tolist(),
            }
            for b in scene.boxes
        ],
        "spheres": [
            {"center": s.center.tolist(), "radius": s.radius, "color": s.color.tolist()}
            for s in scene.spheres
        ],
        "gamma_true": scene.gamma_true.tolist(),
        "scale_corruption": scene.scale_corruption,
        "n_scale_pairs": scene.n_scale_pairs,
        "feature_downsample": scene.feature_downsample,
    }


def scene_from_dict(d: dict) -> SyntheticScene:
    cams = [
        CameraModel(
            fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
            width=c["width"], height=c["height"],
            cam_from_ego=Pose(
                np.array(c["cam_from_ego"]["rotation"]),
                np.array(c["cam_from_ego"]["translation"]),
            ),
        )
        for c in d["cameras"]
    ]
    return SyntheticScene(
        seed=int(d["seed"]),
        cameras=cams,
        ego_start=np.array(d["ego_start"], dtype=np.float64),
        ego_step=np.array(d["ego_step"], dtype=np.float64),
        n_frames=int(d["n_frames"]),
        ground_z=float(d["ground"]["z"]),
        ground_colors=np.array(d["ground"]["colors"], dtype=np.float64),
        ground_period=float(d["ground"]["period"]),
        boxes=[
            BoxSpec(
                np.array(b["center"], dtype=np.float64),
                np.array(b["size"], dtype=np.float64),
                np.array(b["color"], dtype=np.float64),
                np.array(b["velocity"], dtype=np.float64),
            )
            for b in d.get("boxes", [])
        ],
        spheres=[
            SphereSpec(
                np.array(s["center"], dtype=np.float64), float(s["radius"]),
                np.array(s["color"], dtype=np.float64),
            )
            for s in d.get("spheres", [])
        ],
        sky_color=np.array(d["sky_color"], dtype=np.float64),
        sun_direction=np.array(d["sun_direction"], dtype=np.float64),
        ambient=float(d["ambient"]),
        gamma_true=np.array(d["gamma_true"], dtype=np.float64),
        scale_corruption=bool(d["scale_corruption"]),
        n_scale_pairs=int(d["n_scale_pairs"]),
        feature_downsample=int(d.get("feature_downsample", 1)),
    )


def save_scene(scene: SyntheticScene, path) -> None:
    with open(path, "w") as fh:
        json.dump(scene_to_dict(scene), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scene(path) -> SyntheticScene:
    with open(path) as fh:
        return scene_from_dict(json.load(fh))
