"""Command-line interface.

Subcommands: run (streaming loop), render-novel (render a checkpoint from an
arbitrary pose), eval (metrics between two image directories), gradcheck
(finite-difference audits), gen-scene (write the default synthetic scene).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigNotFound, UnisplatError
from .gaussians import concat_sets, load_ply
from .imgio import metrics_line, read_ppm, write_frame_images
from .losses import psnr, ssim
from .memory import load_memory
from .oracle import default_scene, make_camera, save_scene
from .pipeline import PipelineConfig, run as run_pipeline
from .renderer import render


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unisplat")
    sub = p.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="stream a scene through the full per-frame loop")
    runp.add_argument("--config", required=True)
    runp.add_argument("--scene", required=True)
    runp.add_argument("--out", required=True)
    runp.add_argument("--frames", type=int, default=None)
    runp.add_argument("--scale-mode", default=None,
                      choices=["off", "oracle_ls", "oracle_robust", "predicted"])
    runp.add_argument("--seed", type=int, default=None)
    runp.add_argument("--trace", action="store_true", default=None)

    nv = sub.add_parser("render-novel", help="render a memory checkpoint and/or "
                                             "gaussian dump from an arbitrary pose")
    nv.add_argument("--memory-ply", default=None)
    nv.add_argument("--memory-meta", default=None)
    nv.add_argument("--gaussians", default=None, help="extra gaussian PLY to include")
    nv.add_argument("--out", required=True, help="output image base path (no extension)")
    nv.add_argument("--width", type=int, default=96)
    nv.add_argument("--height", type=int, default=64)
    nv.add_argument("--hfov-deg", type=float, default=60.0)
    nv.add_argument("--yaw-deg", type=float, default=0.0)
    nv.add_argument("--position", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    nv.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))

    ev = sub.add_parser("eval", help="PSNR/SSIM between two directories of PPM images")
    ev.add_argument("--pred-dir", required=True)
    ev.add_argument("--gt-dir", required=True)
    ev.add_argument("--out", required=True, help="metrics JSONL path")

    gc = sub.add_parser("gradcheck", help="finite-difference audits of renderer and losses")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--cases", type=int, default=20)

    gs = sub.add_parser("gen-scene", help="write a default synthetic scene file")
    gs.add_argument("--out", required=True)
    gs.add_argument("--seed", type=int, default=7)
    gs.add_argument("--frames", type=int, default=8)
    gs.add_argument("--static", action="store_true", help="omit the dynamic object")
    return p


def _cmd_run(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        raise ConfigNotFound(f"config file not found: {config_path}")
    with open(config_path) as fh:
        raw = json.load(fh)
    if args.frames is not None:
        raw["n_frames"] = args.frames
    if args.scale_mode is not None:
        raw["scale_mode"] = args.scale_mode
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.trace:
        raw["trace"] = True
    PipelineConfig.from_dict(raw)  # validate before writing the merged file
    merged = Path(args.out)
    merged.mkdir(parents=True, exist_ok=True)
    resolved = merged / "config_resolved.json"
    with open(resolved, "w") as fh:
        json.dump(raw, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return run_pipeline(resolved, args.scene, args.out)


def _cmd_render_novel(args) -> int:
    sets = []
    if args.memory_ply:
        if not args.memory_meta:
            raise UnisplatError("--memory-meta required with --memory-ply")
        bank = load_memory(args.memory_ply, args.memory_meta)
        sets.append(bank.gaussians)
    if args.gaussians:
        sets.append(load_ply(args.gaussians))
    if not sets:
        raise UnisplatError("nothing to render: pass --memory-ply and/or --gaussians")
    gs = concat_sets(sets)
    cam = make_camera(args.yaw_deg, args.width, args.height, args.hfov_deg,
                      position=tuple(args.position))
    fr = render(gs, cam, np.asarray(args.background))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    written = write_frame_images(fr, args.out)
    print("\n".join(str(w) for w in written))
    return 0


def _cmd_eval(args) -> int:
    pred_dir = Path(args.pred_dir)
    gt_dir = Path(args.gt_dir)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise ConfigNotFound("eval needs two existing directories")
    names = sorted(p.name for p in pred_dir.glob("*.ppm"))
    if not names:
        raise UnisplatError(f"no .ppm files in {pred_dir}")
    lines = []
    for i, name in enumerate(names):
        gt_path = gt_dir / name
        if not gt_path.exists():
            raise UnisplatError(f"missing ground-truth image {gt_path}")
        pred = read_ppm(pred_dir / name)
        gt = read_ppm(gt_path)
        lines.append(metrics_line({
            "frame_id": i, "view_id": name,
            "psnr_db": psnr(pred, gt), "ssim": ssim(pred, gt),
        }))
    with open(args.out, "w") as fh:
        for line in lines:
            fh.write(line + "\n")
    print(f"wrote {len(lines)} records to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_audit

    ok = run_audit(seed=args.seed, cases=args.cases, verbose=True)
    print("gradcheck: " + ("all passed" if ok else "FAILURES"))
    return 0 if ok else 1


def _cmd_gen_scene(args) -> int:
    scene = default_scene(seed=args.seed, n_frames=args.frames, dynamic=not args.static)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_scene(scene, args.out)
    print(f"wrote scene to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "render-novel": _cmd_render_novel,
        "eval": _cmd_eval,
        "gradcheck": _cmd_gradcheck,
        "gen-scene": _cmd_gen_scene,
    }
    try:
        return handlers[args.command](args)
    except UnisplatError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
