"""Batch entry points: dataset generation, training, evaluation, inference, bench.

Exit codes: 0 ok, 2 bad flags (argparse), 3 I/O failure, 4 training
divergence, 5 checkpoint/architecture mismatch, 6 malformed PCB1. All
diagnostics go to stderr; results land in files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_ARCH = 5
EXIT_BAD_PCB = 6


def _err(msg: str):
    print(f"occugrasp: {msg}", file=sys.stderr)


def _config_from_args(args) -> "RunConfig":
    from .config import _parse_value, load_config

    overrides = {k: _parse_value(k, v) for k, v in (getattr(args, "set", None) or [])}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed

    def on_default(key, value):
        if not getattr(args, "quiet", False):
            _err(f"config: using default {key} = {value}")

    return load_config(getattr(args, "config", None), overrides, on_default=on_default)


def cmd_gen_data(args) -> int:
    from .datagen import GenParams, generate_dataset

    cfg = _config_from_args(args)
    params = GenParams(
        n_scenes=args.scenes,
        seed=cfg.seed,
        views=args.views if args.views is not None else cfg.views,
        noise_sigma=args.noise_sigma if args.noise_sigma is not None else cfg.noise_sigma,
        noise_frac=args.noise_frac if args.noise_frac is not None else cfg.noise_frac,
        n_points=cfg.n_points,
        label_points=cfg.label_points,
        pool_size=cfg.pool_size,
        v_dirs=cfg.v_dirs,
        voxel_size=cfg.voxel_size,
        with_labels=not args.no_labels,
    )
    try:
        generate_dataset(args.out, params, workers=args.threads)
    except OSError as e:
        _err(f"gen-data I/O failure: {e}")
        return EXIT_IO
    return 0


def cmd_train(args) -> int:
    from .training import TrainDiverged, train

    cfg = _config_from_args(args)
    try:
        result = train(cfg, args.data, args.out, resume=args.resume, quiet=args.quiet)
    except TrainDiverged as e:
        _err(str(e))
        return EXIT_DIVERGED
    except (FileNotFoundError, OSError) as e:
        _err(f"train I/O failure: {e}")
        return EXIT_IO
    except ValueError as e:
        if "architecture mismatch" in str(e):
            _err(str(e))
            return EXIT_ARCH
        raise
    _err(f"checkpoint written to {result.checkpoint}")
    return 0


def _metrics_csv(evals, agg, header_meta: dict) -> str:
    lines = ["# " + json.dumps(header_meta, sort_keys=True)]
    lines.append("scene,iou,f1,precision,recall,ap,region_voxels")

    def fmt(v):
        return "" if v is None else f"{v:.9g}"

    for e in evals:
        lines.append(
            f"{e.index},{fmt(e.iou)},{fmt(e.f1)},{fmt(e.precision)},{fmt(e.recall)},{fmt(e.ap)},{e.n_region_voxels}"
        )
    lines.append(
        f"aggregate,{fmt(agg['iou'])},{fmt(agg['f1'])},{fmt(agg['precision'])},{fmt(agg['recall'])},{fmt(agg['ap'])},"
    )
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    from .training import aggregate_evals, evaluate_scenes, load_model

    cfg = _config_from_args(args)
    try:
        model = load_model(args.ckpt, cfg)
    except ValueError as e:
        _err(str(e))
        return EXIT_ARCH if "mismatch" in str(e) else EXIT_IO
    except (FileNotFoundError, OSError) as e:
        _err(f"eval I/O failure: {e}")
        return EXIT_IO
    ablate = sorted(args.ablate or [])
    try:
        evals = evaluate_scenes(
            model,
            args.data,
            seed=cfg.seed,
            noise_sigma=args.noise_sigma or 0.0,
            noise_frac=args.noise_frac or 0.0,
            views=args.views,
            n_candidates=cfg.n_candidates,
        )
    except (FileNotFoundError, OSError) as e:
        _err(f"eval I/O failure: {e}")
        return EXIT_IO
    agg = aggregate_evals(evals)
    meta = {"ablate": ablate, "seed": cfg.seed, "noise_sigma": args.noise_sigma or 0.0}
    csv = _metrics_csv(evals, agg, meta)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write(csv)
    _err(f"aggregate: {json.dumps(agg, sort_keys=True)}")
    return 0


def cmd_infer(args) -> int:
    from .grasp import poses_to_csv
    from .occupancy import prediction_to_grid
    from .pipeline import run_inference
    from .pointcloud import read_pcb1, sample_fixed
    from .scenes import write_occ1
    from .training import load_model

    cfg = _config_from_args(args)
    try:
        model = load_model(args.ckpt, cfg)
    except ValueError as e:
        _err(str(e))
        return EXIT_ARCH if "mismatch" in str(e) else EXIT_IO
    except (FileNotFoundError, OSError) as e:
        _err(f"infer I/O failure: {e}")
        return EXIT_IO
    try:
        cloud = read_pcb1(args.cloud)
    except (ValueError, OSError) as e:
        _err(f"malformed PCB1 input: {e}")
        return EXIT_BAD_PCB
    pts = sample_fixed(cloud, cfg.n_points, seed=cfg.seed)
    result = run_inference(model, pts.points, seed=cfg.seed, n_candidates=cfg.n_candidates)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "poses.csv"), "w", encoding="utf-8") as f:
        f.write(poses_to_csv(result.poses))
    if result.region is not None:
        write_occ1(
            os.path.join(args.out, "predicted.occ1"),
            prediction_to_grid(result.region, result.prediction.occupied),
        )
    t = result.timings
    _err(
        "timing: encode=%.4fs planes=%.4fs query=%.4fs decode=%.4fs total=%.4fs"
        % (t["encode"], t["planes"], t["query"], t["decode"], t["total"])
    )
    return 0


def cmd_bench(args) -> int:
    from .experiments import bench_strategies

    cfg = _config_from_args(args)
    try:
        table = bench_strategies(cfg, args.data, args.out, workers=args.threads, quiet=args.quiet)
    except (FileNotFoundError, OSError) as e:
        _err(f"bench I/O failure: {e}")
        return EXIT_IO
    _err(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occugrasp",
        description="Local occupancy-enhanced grasp pose estimation on synthetic SDF scenes",
    )
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker process cap for data generation / benchmarks")
    parser.add_argument("--quiet", action="store_true", help="suppress progress diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="seed override (also OCCUGRASP_SEED)")
    common.add_argument("--set", nargs=2, action="append", metavar=("KEY", "VALUE"),
                        help="override any documented config key")

    p = sub.add_parser("gen-data", parents=[common], help="generate synthetic scenes + labels")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, help="views merged per cloud (default from config)")
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--noise-frac", type=float)
    p.add_argument("--no-labels", action="store_true", help="skip oracle label generation")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", action="append", help="ablation tags recorded in the CSV header")
    p.add_argument("--views", type=int, help="re-render with this many merged views")
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--noise-frac", type=float)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="poses + occupancy for one PCB1 cloud")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("bench", parents=[common], help="occupancy-strategy comparison table")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ValueError as e:
        _err(str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
