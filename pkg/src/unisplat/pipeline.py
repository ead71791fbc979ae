"""Streaming per-frame orchestration and run-level artifact output.

Per frame, in order: scale alignment -> voxelize -> attach view features ->
spatial conv -> temporal fuse -> dual-branch decode -> memory view-filter ->
completion -> memory update -> render and metrics. Cross-frame state (the
previous fused scaffold and the static memory) is owned by a single
PipelineState that one driver mutates.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, backend
from .decoder import RAW_CHANNELS, decode_frame
from .errors import ConfigNotFound, PipelineStageError
from .fusion import SparseConvNet, TimeEmbedding, sparse_conv_forward, temporal_fuse
from .gaussians import GaussianSet, SOURCE_MEMORY, SOURCE_POINT, SOURCE_VOXEL, save_ply
from .geom import CameraModel, GridSpec, Pose, compose, invert
from .imgio import config_hash, metrics_line, write_frame_images
from .losses import LossConfig, SupervisionTargets, TotalLoss, ViewRender, psnr, ssim, total_loss
from .memory import MemoryBank, complete, save_memory, update, view_filter
from .nets import TinyNet
from .oracle import C_GEO, FEATURE_CHANNELS, FrameBundle, load_scene, raycast_frame
from .scaffold import INIT_FEATURE_DIM, SparseScaffold, attach_view_features, occupancy, voxelize
from .scale import apply_scale, optimal_scale_ls, optimal_scale_robust, predict_scale
from .renderer import render

DESK_GRID = {"p_min": [-16.0, -16.0, -2.0], "p_max": [16.0, 16.0, 6.0],
             "voxel_size": [0.25, 0.25, 0.5]}
PAPER_GRID = {"p_min": [-72.0, -72.0, -4.0], "p_max": [72.0, 72.0, 12.0],
              "voxel_size": [0.1, 0.1, 0.2]}

SCALE_MODES = ("off", "oracle_ls", "oracle_robust", "predicted")

_CONFIG_DEFAULTS = {
    "grid": DESK_GRID,
    "g": 2,
    "tau_d": 0.2,
    "loss": {"lambda_mse": 5.0, "lambda_lpips": 0.05, "lambda_dyn": 0.05,
             "lambda_scale": 0.1},
    "scale_mode": "off",
    "robust_inlier_fraction": 0.7,
    "memory_capacity": 2_000_000,
    "background": [0.0, 0.0, 0.0],
    "seed": 0,
    "weights": None,
    "net_init": "identity",
    "decoder_init": "zero",
    "spatial_layers": 4,
    "temporal_layers": 2,
    "hidden_width": 64,
    "temporal_fusion": True,
    "inject_gt_dynamic": False,
    "n_frames": None,
    "tile": 16,
    "trace": False,
    "write_png": True,
}


@dataclass
class PipelineConfig:
    raw: dict

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        merged = json.loads(json.dumps(_CONFIG_DEFAULTS))
        unknown = set(d) - set(merged)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, value in d.items():
            if key in ("grid", "loss") and value is not None:
                sub_unknown = set(value) - set(merged[key])
                if sub_unknown:
                    raise ValueError(f"unknown {key} keys: {sorted(sub_unknown)}")
                merged[key].update(value)
            else:
                merged[key] = value
        cfg = PipelineConfig(merged)
        cfg.validate()
        return cfg

    @staticmethod
    def load(path) -> "PipelineConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigNotFound(f"config file not found: {p}")
        with open(p) as fh:
            return PipelineConfig.from_dict(json.load(fh))

    def validate(self) -> None:
        c = self.raw
        GridSpec(np.array(c["grid"]["p_min"]), np.array(c["grid"]["p_max"]),
                 np.array(c["grid"]["voxel_size"]))
        if c["scale_mode"] not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}")
        if not (isinstance(c["g"], int) and c["g"] >= 1):
            raise ValueError("g must be a positive integer")
        if not (0.0 < c["tau_d"] < 1.0):
            raise ValueError("tau_d must be in (0, 1)")
        if c["net_init"] not in ("identity", "random"):
            raise ValueError("net_init must be 'identity' or 'random'")
        if c["decoder_init"] not in ("zero", "random"):
            raise ValueError("decoder_init must be 'zero' or 'random'")
        self.loss_config()  # validates weights

    def __getitem__(self, key):
        return self.raw[key]

    def grid_spec(self) -> GridSpec:
        g = self.raw["grid"]
        return GridSpec(np.array(g["p_min"]), np.array(g["p_max"]),
                        np.array(g["voxel_size"]))

    def loss_config(self) -> LossConfig:
        l = self.raw["loss"]
        return LossConfig(lambda_mse=l["lambda_mse"], lambda_lpips=l["lambda_lpips"],
                          lambda_dyn=l["lambda_dyn"], lambda_scale=l["lambda_scale"])


@dataclass
class PipelineNets:
    spatial: SparseConvNet
    temporal: SparseConvNet
    embedding: TimeEmbedding
    point_head: TinyNet
    voxel_head: TinyNet
    scale_head: TinyNet

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for name, net in (("spatial", self.spatial), ("temporal", self.temporal)):
            for k, v in net.named_parameters().items():
                out[f"{name}.{k}"] = v
        out["embedding.table"] = self.embedding.table
        for name, net in (("point_head", self.point_head),
                          ("voxel_head", self.voxel_head),
                          ("scale_head", self.scale_head)):
            for i, (w, b) in enumerate(zip(net.weights, net.biases)):
                out[f"{name}.{i}.weight"] = w
                out[f"{name}.{i}.bias"] = b
        return out


@dataclass
class PipelineState:
    config: PipelineConfig
    grid: GridSpec
    nets: PipelineNets
    memory: MemoryBank
    prev_fused: SparseScaffold | None = None
    prev_world_from_ego: Pose | None = None
    frame_index: int = 0


@dataclass
class FrameResult:
    timestep: int
    counts: dict[str, int]
    scaffold_voxels: int
    gaussians: GaussianSet
    renders: dict[str, object]
    metrics: list[dict]
    loss: TotalLoss | None
    gamma: np.ndarray | None
    timings: dict[str, float] = field(default_factory=dict)


def build_nets(config: PipelineConfig) -> PipelineNets:
    c_s = FEATURE_CHANNELS + INIT_FEATURE_DIM
    hidden = config["hidden_width"]
    g = config["g"]
    rng = np.random.default_rng(config["seed"])
    if config["net_init"] == "identity":
        spatial = SparseConvNet.identity(c_s, config["spatial_layers"])
        temporal = SparseConvNet.identity(c_s, config["temporal_layers"])
    else:
        spatial = SparseConvNet.random(c_s, config["spatial_layers"], rng, scale=0.2)
        temporal = SparseConvNet.random(c_s, config["temporal_layers"], rng, scale=0.2)
    emb = TimeEmbedding.zeros(c_s)
    point_widths = [c_s + FEATURE_CHANNELS, hidden, RAW_CHANNELS]
    voxel_widths = [c_s, hidden, RAW_CHANNELS * g]
    scale_widths = [C_GEO, hidden, 1]
    if config["decoder_init"] == "zero":
        point_head = TinyNet.zeros(point_widths)
        voxel_head = TinyNet.zeros(voxel_widths)
        scale_head = TinyNet.zeros(scale_widths)
    else:
        point_head = TinyNet.random(point_widths, rng, scale=0.1)
        voxel_head = TinyNet.random(voxel_widths, rng, scale=0.1)
        scale_head = TinyNet.random(scale_widths, rng, scale=0.1)
    nets = PipelineNets(spatial, temporal, emb, point_head, voxel_head, scale_head)
    if config["weights"]:
        load_weights_into(nets, config["weights"])
    return nets


def build_state(config: PipelineConfig) -> PipelineState:
    return PipelineState(
        config=config, grid=config.grid_spec(), nets=build_nets(config),
        memory=MemoryBank(capacity=config["memory_capacity"]),
    )


# ---------------------------------------------------------------------------
# Weights blob: flat little-endian f32 + JSON sidecar of (name, shape) pairs.
# ---------------------------------------------------------------------------

def save_weights(named: dict[str, np.ndarray], path_prefix) -> None:
    order = sorted(named)
    with open(f"{path_prefix}.bin", "wb") as fh:
        for name in order:
            fh.write(np.ascontiguousarray(named[name], dtype="<f4").tobytes())
    meta = {"tensors": [{"name": n, "shape": list(named[n].shape)} for n in order]}
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")


def load_weights(path_prefix) -> dict[str, np.ndarray]:
    with open(f"{path_prefix}.json") as fh:
        meta = json.load(fh)
    out = {}
    with open(f"{path_prefix}.bin", "rb") as fh:
        for entry in meta["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            out[entry["name"]] = np.frombuffer(
                fh.read(4 * n), dtype="<f4"
            ).astype(np.float64).reshape(shape)
    return out


def load_weights_into(nets: PipelineNets, path_prefix) -> None:
    loaded = load_weights(path_prefix)
    params = nets.named_parameters()
    for name, value in loaded.items():
        if name not in params:
            raise ValueError(f"weights file has unknown tensor {name!r}")
        if params[name].shape != value.shape:
            raise ValueError(f"tensor {name!r} shape {value.shape} != {params[name].shape}")
        params[name][...] = value


# ---------------------------------------------------------------------------
# Frame step
# ---------------------------------------------------------------------------

def _stage(name, fn, timings, trace):
    t0 = time.perf_counter() if trace else 0.0
    try:
        out = fn()
    except Exception as exc:  # noqa: BLE001 - re-tag with the stage name
        raise PipelineStageError(name, exc) from exc
    if trace:
        timings[name] = time.perf_counter() - t0
    return out


def _gt_dynamic_scores(gs: GaussianSet, scaffold, point_map, dynamic_masks, g: int):
    """Replace decoder dynamic scores with ground-truth labels: point
    primitives take their source pixel's flag; voxel primitives are flagged
    when their voxel holds any dynamic point."""
    pts, cam, iy, ix = point_map.valid_points()
    flags = dynamic_masks[cam, iy, ix]
    scores = gs.dynamics.copy()
    is_point = gs.sources == SOURCE_POINT
    scores[is_point] = flags.astype(np.float64)
    idx = scaffold.lookup(pts[flags])
    voxel_dyn = np.zeros(len(scaffold), dtype=bool)
    voxel_dyn[idx[idx >= 0]] = True
    is_voxel = gs.sources == SOURCE_VOXEL
    scores[is_voxel] = np.repeat(voxel_dyn.astype(np.float64), g)
    gs.dynamics = scores
    return gs


def step(state: PipelineState, bundle: FrameBundle,
         novel_bundle: FrameBundle | None = None) -> FrameResult:
    """Advance the stream by one frame; mutates state (fused cache, memory)."""
    cfg = state.config
    trace = bool(cfg["trace"])
    timings: dict[str, float] = {}
    t = bundle.timestep

    def scale_stage():
        mode = cfg["scale_mode"]
        if mode == "off":
            return bundle.point_map, None
        if mode == "oracle_ls":
            gamma = optimal_scale_ls(bundle.scale_reference)
        elif mode == "oracle_robust":
            gamma = optimal_scale_robust(bundle.scale_reference,
                                         cfg["robust_inlier_fraction"])
        else:
            pooled = bundle.features.geo.mean(axis=(1, 2))
            gamma = predict_scale(pooled, state.nets.scale_head)
        return apply_scale(bundle.point_map, gamma), gamma

    point_map, gamma = _stage("scale", scale_stage, timings, trace)
    s0 = _stage("voxelize", lambda: voxelize(point_map, state.grid), timings, trace)
    s1 = _stage("attach", lambda: attach_view_features(s0, bundle.cameras, bundle.features),
                timings, trace)
    s_spa = _stage("spatial", lambda: sparse_conv_forward(state.nets.spatial, s1),
                   timings, trace)

    def temporal_stage():
        if not cfg["temporal_fusion"]:
            return s_spa
        if state.prev_world_from_ego is None:
            t_rel = Pose.identity()
        else:
            t_rel = compose(invert(bundle.world_from_ego), state.prev_world_from_ego)
        return temporal_fuse(s_spa, state.prev_fused, t_rel, state.nets.embedding,
                             state.nets.temporal)

    fused = _stage("temporal", temporal_stage, timings, trace)
    state.prev_fused = fused
    state.prev_world_from_ego = bundle.world_from_ego

    def decode_stage():
        gs = decode_frame(point_map, fused, bundle.features, bundle.images,
                          state.nets.point_head, state.nets.voxel_head, cfg["g"], frame=t)
        if cfg["inject_gt_dynamic"]:
            gs = _gt_dynamic_scores(gs, fused, point_map, bundle.dynamic_masks, cfg["g"])
        return gs

    gaussians = _stage("decode", decode_stage, timings, trace)
    filtered = _stage(
        "memory_filter",
        lambda: view_filter(state.memory, bundle.cameras, bundle.world_from_ego),
        timings, trace,
    )
    complete_set = _stage(
        "complete", lambda: complete(gaussians, filtered, bundle.world_from_ego),
        timings, trace,
    )
    state.memory = _stage(
        "memory_update",
        lambda: update(filtered, gaussians, bundle.world_from_ego, cfg["tau_d"]),
        timings, trace,
    )

    def render_stage():
        bg = np.array(cfg["background"], dtype=np.float64)
        renders: dict[str, object] = {}
        metrics: list[dict] = []
        loss_renders: list[ViewRender] = []
        loss_targets: list[SupervisionTargets] = []
        for k, cam in enumerate(bundle.cameras):
            fr = render(complete_set, cam, bg, tile=cfg["tile"])
            renders[f"cam{k}"] = fr
            metrics.append({
                "frame_id": t, "view_id": f"cam{k}",
                "psnr_db": psnr(fr.color, bundle.images[k]),
                "ssim": ssim(fr.color, bundle.images[k]),
            })
            loss_renders.append(ViewRender(color=fr.color, dyn=fr.dyn))
            loss_targets.append(bundle.targets[k])
        if novel_bundle is not None:
            ego_next_from_cur = compose(invert(novel_bundle.world_from_ego),
                                        bundle.world_from_ego)
            for k, cam in enumerate(bundle.cameras):
                novel_cam = CameraModel(
                    fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                    width=cam.width, height=cam.height,
                    cam_from_ego=compose(cam.cam_from_ego, ego_next_from_cur),
                )
                fr = render(complete_set, novel_cam, bg, tile=cfg["tile"])
                renders[f"novel_cam{k}"] = fr
                metrics.append({
                    "frame_id": t, "view_id": f"novel_cam{k}",
                    "psnr_db": psnr(fr.color, novel_bundle.images[k]),
                    "ssim": ssim(fr.color, novel_bundle.images[k]),
                })
                loss_renders.append(ViewRender(color=fr.color, dyn=fr.dyn))
                tgt = novel_bundle.targets[k]
                loss_targets.append(SupervisionTargets(
                    image=tgt.image, dynamic_mask=tgt.dynamic_mask,
                    background_mask=tgt.background_mask, role="novel",
                    gamma_target=tgt.gamma_target,
                ))
        loss = total_loss(loss_renders, loss_targets, cfg.loss_config(), gamma_pred=gamma)
        return renders, metrics, loss

    renders, metrics, loss = _stage("render", render_stage, timings, trace)
    state.frame_index = t + 1

    counts = {
        "point": int(np.sum(complete_set.sources == SOURCE_POINT)),
        "voxel": int(np.sum(complete_set.sources == SOURCE_VOXEL)),
        "memory": int(np.sum(complete_set.sources == SOURCE_MEMORY)),
    }
    n_v, _ = occupancy(fused)
    return FrameResult(
        timestep=t, counts=counts, scaffold_voxels=n_v, gaussians=complete_set,
        renders=renders, metrics=metrics, loss=loss, gamma=gamma, timings=timings,
    )


# ---------------------------------------------------------------------------
# Run driver
# ---------------------------------------------------------------------------

def run(config_path, scene_path, out_dir) -> int:
    """Stream all frames, writing images, metrics, dumps and a manifest."""
    config = PipelineConfig.load(config_path)
    scene_p = Path(scene_path)
    if not scene_p.exists():
        raise ConfigNotFound(f"scene file not found: {scene_p}")
    scene = load_scene(scene_p)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    n_frames = scene.n_frames if config["n_frames"] is None else \
        min(int(config["n_frames"]), scene.n_frames)
    state = build_state(config)
    results = []
    lines = []
    next_bundle = raycast_frame(scene, 0) if n_frames > 0 else None
    for t in range(n_frames):
        bundle = next_bundle
        next_bundle = raycast_frame(scene, t + 1) if t + 1 < scene.n_frames else None
        res = step(state, bundle, novel_bundle=next_bundle)
        results.append(res)
        for name, fr in res.renders.items():
            write_frame_images(fr, out / "images" / f"frame{t:03d}_{name}",
                               png=config["write_png"])
        for record in res.metrics:
            lines.append(metrics_line(record))
        if config["trace"]:
            cards = {"n_voxels": res.scaffold_voxels, **res.counts}
            print(f"[trace] frame {t}: " +
                  " ".join(f"{k}={v:.4f}s" for k, v in res.timings.items()) +
                  f" | {cards}")

    with open(out / "metrics.jsonl", "w") as fh:
        for line in lines:
            fh.write(line + "\n")
    if results:
        save_ply(results[-1].gaussians, out / "gaussians_final.ply")
    save_memory(state.memory, out / "memory.ply", out / "memory.json")

    manifest = {
        "config": config.raw,
        "config_sha256": config_hash(config.raw),
        "seed": config["seed"],
        "n_frames": n_frames,
        "scene": scene_p.name,
        "versions": {
            "unisplat": __version__,
            "numpy": np.__version__,
            "backend": backend.get_backend(),
        },
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return 0
