"""Command-line entry points: run, eval, ablate, render."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .config import load_config
from .datasets import generate, load_tum, scene_from_toml
from .fileio import read_splat_ply, write_png, write_splat_ply
from .geometry import CameraIntrinsics, Pose
from .pipeline import PipelineConfig, evaluate, run
from .splats import render as render_model


def _load_dataset(path):
    """Frames plus intrinsics (None when the dataset does not define them)."""
    if os.path.isdir(path):
        frames, dropped = load_tum(path)
        if dropped:
            print(f"note: {dropped} frame(s) without an associated pose",
                  file=sys.stderr)
        return frames, None
    scene = scene_from_toml(path)
    return generate(scene), scene.intrinsics


def _write_outputs(out_dir, report, model, buffer):
    os.makedirs(out_dir, exist_ok=True)
    write_splat_ply(os.path.join(out_dir, "model.ply"), model)
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2)
    for kf in buffer.keyframes():
        if kf.state < 3:  # only integrated views have meaningful renders
            continue
        out = render_model(model, kf.pose, kf.intrinsics)
        write_png(os.path.join(out_dir, f"render_{kf.index:04d}.png"),
                  out.color)


def cmd_run(args):
    config = load_config(args.config) if args.config else PipelineConfig()
    frames, K = _load_dataset(args.dataset)
    report, model, buffer = run(frames, config, K=K)
    _write_outputs(args.out, report, model, buffer)
    print(json.dumps({k: v for k, v in report.items() if k != "keyframes"},
                     indent=2))
    return 0


def cmd_eval(args):
    model = read_splat_ply(args.model)
    frames, K = _load_dataset(args.dataset)
    if K is None:
        h, w = frames[0].load_image().shape[:2]
        K = CameraIntrinsics(fx=float(w), fy=float(w), cx=w / 2.0,
                             cy=h / 2.0, width=w, height=h)
    views = [(f.load_image(), f.pose) for f in frames]
    per_view, (mean_psnr, mean_ssim) = evaluate(model, views, K)
    print(json.dumps({
        "mean_psnr": mean_psnr,
        "mean_ssim": mean_ssim,
        "views": [{"psnr": p, "ssim": s} for p, s in per_view],
    }, indent=2))
    return 0


ABLATION_METHODS = {
    # progressively enable MVS depth, the filtering chain, and the
    # unexplored-region mask on top of the raw depth prior
    "A": dict(use_mvs=False, use_filtering=False, use_mask=False),
    "B": dict(use_mvs=True, use_filtering=False, use_mask=False),
    "C": dict(use_mvs=True, use_filtering=True, use_mask=False),
    "D": dict(use_mvs=True, use_filtering=True, use_mask=True),
}


def run_ablation(frames, base_config: PipelineConfig, K=None,
                 eval_frames=None) -> dict:
    """Run methods A-D and collect PSNR/SSIM/FPS per method.

    With `eval_frames`, quality is scored on those held-out views (which
    exposes bad geometry that training views forgive); otherwise on the
    integrated keyframes.
    """
    results = {}
    for name, switches in ABLATION_METHODS.items():
        config = dataclasses.replace(base_config, **switches)
        report, model, _ = run(list(frames), config, K=K)
        p, s = report["mean_psnr"], report["mean_ssim"]
        if eval_frames is not None:
            if K is None:
                raise ValueError("eval_frames requires explicit intrinsics")
            _, (p, s) = evaluate(
                model, [(f.image, f.pose) for f in eval_frames], K)
        results[name] = {"psnr": p, "ssim": s,
                         "fps": report["fps"],
                         "splats": report["splat_count"]}
    return results


def cmd_ablate(args):
    config = load_config(args.config) if args.config else PipelineConfig()
    frames, K = _load_dataset(args.dataset)
    if K is not None:  # hold out every 6th frame for novel-view scoring
        train = [f for i, f in enumerate(frames) if i % 6 != 0]
        held = [f for i, f in enumerate(frames) if i % 6 == 0]
        results = run_ablation(train, config, K=K, eval_frames=held)
    else:
        results = run_ablation(frames, config, K=K)
    print(f"{'method':>8} {'psnr':>8} {'ssim':>8} {'fps':>8} {'splats':>8}")
    for name, r in results.items():
        print(f"{name:>8} {r['psnr']:8.2f} {r['ssim']:8.4f} "
              f"{r['fps']:8.2f} {r['splats']:8d}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablation.json"), "w") as f:
            json.dump(results, f, indent=2)
    return 0


def cmd_render(args):
    model = read_splat_ply(args.model)
    with open(args.pose) as f:
        spec = json.load(f)
    pose = Pose(np.asarray(spec["quat"], dtype=np.float64),
                np.asarray(spec["t"], dtype=np.float64))
    K = CameraIntrinsics(**spec["intrinsics"])
    out = render_model(model, pose, K)
    write_png(args.out, out.color)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="splatstream",
        description="online dense reconstruction into a splat map")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="reconstruct a sequence")
    p.add_argument("--config", help="pipeline TOML")
    p.add_argument("--dataset", required=True,
                   help="TUM directory or scene TOML")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate a saved model")
    p.add_argument("--model", required=True, help="splat PLY")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run methods A-D and compare")
    p.add_argument("--config", help="pipeline TOML")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="directory for ablation.json")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("render", help="render a saved model from a pose")
    p.add_argument("--model", required=True, help="splat PLY")
    p.add_argument("--pose", required=True, help="pose JSON")
    p.add_argument("--out", required=True, help="output PNG")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
