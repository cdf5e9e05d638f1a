"""Command line surface: scenario generation, training, evaluation,
ablations, gradient checks, Kalman-filter runs and visualization."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from . import benchmark as bench
from .harness import gradcheck


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=str, default=None, help="suite config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, required=True, help="output directory")
    p.add_argument("--mode", choices=("fine", "reloc"), default=None)
    p.add_argument("--precision", choices=("f64", "f32"), default=None)


def _suite_config(args, **extra) -> bench.SuiteConfig:
    cfg = bench.load_suite_config(args.config) if args.config else bench.SuiteConfig()
    updates = dict(extra)
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.mode is not None:
        updates["mode"] = args.mode
    if getattr(args, "precision", None) is not None:
        updates["precision"] = args.precision
    return replace(cfg, **updates) if updates else cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bevloc",
        description="uncertainty-guided BEV grid localization benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate scenario files")
    _add_common(p)
    p.add_argument("--count", type=int, default=None)

    p = sub.add_parser("train", help="train a checkpoint on suite scenarios")
    _add_common(p)
    p.add_argument("--ablation", choices=("s1", "s2", "s3", "s4"), default="s1")

    p = sub.add_parser("eval", help="evaluate held-out scenarios")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--untrained", action="store_true",
                   help="evaluate freshly initialized parameters")
    p.add_argument("--ablation", choices=("s1", "s2", "s3", "s4"), default="s1")

    p = sub.add_parser("ablate", help="train + evaluate ablations s1..s4")
    _add_common(p)
    p.add_argument("--ablation", choices=("s1", "s2", "s3", "s4", "all"), default="all")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--op", type=str, default="all")
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("kf-run", help="trajectory fusion with entropy covariance")
    _add_common(p)
    p.add_argument("--frames", type=int, default=200)

    p = sub.add_parser("viz", help="emit inspection heatmaps for one scenario")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, default=None)

    args = parser.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)

    if args.command == "gen":
        cfg = _suite_config(args)
        scenes = bench.run_gen(cfg, args.out, count=args.count)
        print(f"wrote {len(scenes)} scenarios to {args.out}")
        return 0

    if args.command == "train":
        cfg = _suite_config(args)
        _, curve = bench.run_train(cfg, args.out, ablation=args.ablation)
        print(
            f"trained {cfg.steps} steps; loss {curve[0]['total']:.4g} -> "
            f"{curve[-1]['total']:.4g}; checkpoint in {args.out}"
        )
        return 0

    if args.command == "eval":
        cfg = _suite_config(args)
        report, _ = bench.run_eval(
            cfg,
            args.out,
            checkpoint=args.checkpoint,
            untrained=args.untrained,
            ablation=args.ablation,
        )
        print(report.to_text())
        return 0

    if args.command == "ablate":
        cfg = _suite_config(args)
        if args.ablation == "all":
            reports = bench.run_ablation_suite(cfg, args.out)
            for ab, rep in reports.items():
                print(f"{ab}: lateral_mae {rep.mae['lateral']:.4g}")
        else:
            sub_dir = os.path.join(args.out, args.ablation)
            params, _ = bench.run_train(cfg, sub_dir, ablation=args.ablation)
            report, _ = bench.run_eval(
                cfg, sub_dir, params=params, ablation=args.ablation, tag=args.ablation
            )
            print(report.to_text())
        return 0

    if args.command == "gradcheck":
        report = gradcheck(op_selector=args.op, rel_tol=args.tol,
                           seed=args.seed if args.seed is not None else 0)
        text = report.to_text()
        print(text)
        with open(os.path.join(args.out, "gradcheck.txt"), "w", encoding="utf-8") as f:
            f.write(text + "\n")
        return 0 if report.all_passed else 1

    if args.command == "kf-run":
        cfg = bench.KfSuiteConfig(
            seed=args.seed if args.seed is not None else 0, n_frames=args.frames
        )
        out = bench.run_kf_suite(cfg, args.out)
        for k, v in out.items():
            print(f"{k} {v:.6g}")
        return 0

    if args.command == "viz":
        cfg = _suite_config(args)
        bench.run_viz(cfg, args.out, checkpoint=args.checkpoint)
        print(f"wrote heatmaps to {args.out}")
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
