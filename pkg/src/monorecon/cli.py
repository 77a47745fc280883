"""Command-line interface.

Commands: synth, demo-lora, align, reconstruct, eval-depth, eval-pose,
eval-recon.  Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure.  The MONORECON_OUT environment variable, when set, roots
all relative --out paths.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ConfigError, OUTPUT_ROOT_ENV, RunConfig
from . import pipeline
from .pipeline import DataError


def _resolve_out(out: str) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    path = Path(out)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for key, attr in (("seed", "seed"), ("frames", "frames"), ("epochs", "epochs"),
                      ("iters_per_epoch", "iters"), ("patch_size", "patch_size"),
                      ("voxel_size_mm", "voxel_size"),
                      ("recon_threshold_mm", "threshold"),
                      ("depth_cap_mm", "depth_cap")):
        if hasattr(args, attr) and getattr(args, attr) is not None:
            overrides[key] = getattr(args, attr)
    return cfg.with_overrides(**overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monorecon",
        description="Self-supervised depth adaptation and scene reconstruction "
                    "on synthetic scenes.")
    parser.add_argument("--config", help="JSON config file (unknown keys rejected)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default="out", help="output directory "
                        f"(rooted at ${OUTPUT_ROOT_ENV} when set)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset to disk")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--surface", choices=("plane", "sphere", "terrain"), default="terrain")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--corrupt-scale", nargs=2, type=float, metavar=("LO", "HI"),
                   default=None, help="per-frame random affine depth scale range")
    p.add_argument("--corrupt-shift", type=float, default=0.0,
                   help="shift amplitude as a fraction of each frame's max depth")
    p.add_argument("--pose-noise", type=float, default=0.0,
                   help="relative noise on initialization poses")

    p = sub.add_parser("demo-lora",
                       help="toy gated-LoRA training loop with gradient checks; "
                            "the default schedule is scaled down (warm-up 20, 40 "
                            "iterations) so the phase switch is exercised")
    p.add_argument("--iters", type=int, default=40)
    p.add_argument("--warmup", type=int, default=20)

    p = sub.add_parser("align", help="align one frame pair's depth")
    p.add_argument("--data", required=True)
    p.add_argument("--frame-a", type=int, default=0)
    p.add_argument("--frame-b", type=int, default=1)
    p.add_argument("--patch-size", type=int, default=None)

    p = sub.add_parser("reconstruct", help="init -> optimize -> fuse -> export")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--voxel-size", type=float, default=None)

    p = sub.add_parser("eval-depth", help="depth metrics with LSQ pre-alignment")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--depth-cap", type=float, default=None)

    p = sub.add_parser("eval-pose", help="5-frame ATE / RPE")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)

    p = sub.add_parser("eval-recon", help="ICP registration + cloud metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--threshold", type=float, default=None)
    return parser


def _dispatch(args) -> dict:
    cfg = _load_config(args)
    out = _resolve_out(args.out)
    if args.command == "synth":
        corrupt = tuple(args.corrupt_scale) if args.corrupt_scale else None
        pipeline.synth_dataset(out, surface=args.surface, frames=cfg.frames,
                               seed=cfg.seed, width=args.width, height=args.height,
                               corrupt_scale=corrupt,
                               corrupt_shift_frac=args.corrupt_shift,
                               pose_noise=args.pose_noise)
        return {"out": str(out)}
    if args.command == "demo-lora":
        return pipeline.run_demo_lora(cfg, out, iters=args.iters, warmup=args.warmup)
    if args.command == "align":
        return pipeline.run_align(cfg, Path(args.data), out,
                                  frame_a=args.frame_a, frame_b=args.frame_b)
    if args.command == "reconstruct":
        return pipeline.run_reconstruct(cfg, Path(args.data), out)
    if args.command == "eval-depth":
        return pipeline.run_eval_depth(cfg, Path(args.pred), Path(args.gt), out)
    if args.command == "eval-pose":
        return pipeline.run_eval_pose(cfg, Path(args.pred), Path(args.gt), out)
    if args.command == "eval-recon":
        return pipeline.run_eval_recon(cfg, Path(args.pred), Path(args.gt), out)
    raise ConfigError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        report = _dispatch(args)
    except ConfigError as exc:
        print(f"error code=CONFIG message={exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error code=DATA message={exc}", file=sys.stderr)
        return 3
    except (RuntimeError, FloatingPointError, ArithmeticError) as exc:
        print(f"error code=NUMERIC message={exc}", file=sys.stderr)
        return 4
    for key in sorted(report):
        val = report[key]
        if isinstance(val, float):
            print(f"{key}={val:.9g}")
        elif not isinstance(val, (list, tuple, dict)):
            print(f"{key}={val}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
