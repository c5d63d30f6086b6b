"""Strategy benchmarks and multi-seed ablation experiments.

Every job is a pure function of its config and dataset, so jobs can run in a
process pool without affecting results.
"""

from __future__ import annotations

import dataclasses
import json
import multiprocessing as mp
import os
import time

import numpy as np

from . import nn
from .config import RunConfig
from .evalmetrics import eval_grasp_ap, eval_occupancy
from .model import GraspOccModel
from .occupancy import crop_ground_truth
from .pipeline import encode_scene, run_inference
from .pointcloud import read_pcb1, sample_fixed
from .scenes import read_occ1, read_scene
from .training import aggregate_evals, evaluate_scenes, load_model, train

STRATEGIES = ("without_occupancy", "global_triplane", "ball_query", "ours")


def strategy_config(base: RunConfig, strategy: str) -> RunConfig:
    kw = dataclasses.asdict(base)
    if strategy == "without_occupancy":
        kw.update(use_occupancy=False)
    elif strategy == "global_triplane":
        kw.update(use_local_context=False)
    elif strategy == "ball_query":
        kw.update(use_global_context=False)
    elif strategy != "ours":
        raise ValueError(f"unknown strategy {strategy!r}")
    kw["sa_widths"] = tuple(kw["sa_widths"])
    return RunConfig(**kw)


def train_job(args):
    """(tag, config dict, data_dir, out_dir) -> (tag, checkpoint path); cached."""
    tag, cfg_dict, data_dir, out_dir = args
    cfg_dict = dict(cfg_dict)
    cfg_dict["sa_widths"] = tuple(cfg_dict["sa_widths"])
    cfg = RunConfig(**cfg_dict)
    job_dir = os.path.join(out_dir, tag)
    ckpt = os.path.join(job_dir, "model.ckpt")
    if not os.path.exists(ckpt):
        train(cfg, data_dir, job_dir)  # train() pins BLAS threads itself
    return tag, ckpt


def run_trainings(jobs, workers: int = 1) -> dict:
    """jobs: list of (tag, RunConfig, data_dir, out_dir); returns tag -> ckpt."""
    packed = [(t, dataclasses.asdict(c), d, o) for t, c, d, o in jobs]
    if workers > 1 and len(packed) > 1:
        with mp.Pool(min(workers, len(packed))) as pool:
            results = pool.map(train_job, packed)
    else:
        results = [train_job(j) for j in packed]
    return dict(results)


class DenseGrid:
    """resolution^3 cell grid over an axis-aligned box (per-axis step)."""

    def __init__(self, lo, hi, resolution: int):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.resolution = resolution
        self.step = (self.hi - self.lo) / resolution

    def centers(self) -> np.ndarray:
        r = self.resolution
        axes = [self.lo[a] + (np.arange(r) + 0.5) * self.step[a] for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def lookup(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """values over the flat grid read at world points (outside -> 0)."""
        idx = np.floor((np.asarray(points) - self.lo) / self.step).astype(int)
        ok = np.all((idx >= 0) & (idx < self.resolution), axis=1)
        out = np.zeros(points.shape[0], dtype=values.dtype)
        r = self.resolution
        flat = idx[ok, 0] * r * r + idx[ok, 1] * r + idx[ok, 2]
        out[ok] = values[flat]
        return out


def dense_global_query(model: GraspOccModel, points: np.ndarray, resolution: int = 60,
                       bounds=None, chunk: int = 20000):
    """Dense occupancy over a resolution^3 scene grid (the global baseline).

    Returns (probabilities, DenseGrid, wall seconds spent in the query itself).
    """
    from .occupancy import assemble_query_features, decode_occupancy

    with nn.no_grad():
        enc = encode_scene(model, points)
        if bounds is None:
            lo, hi = points.min(axis=0), points.max(axis=0)
        else:
            lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
        grid = DenseGrid(lo, hi, resolution)
        centers = grid.centers()
        probs = np.empty(centers.shape[0])
        t0 = time.perf_counter()
        for a in range(0, centers.shape[0], chunk):
            b = min(a + chunk, centers.shape[0])
            feats = assemble_query_features(
                enc.affine.apply(centers[a:b]), enc.stack, (model.e1, model.e2),
                None, None, None, mode="global",
            )
            probs[a:b] = decode_occupancy(feats, model.occ_decoder).data
        elapsed = time.perf_counter() - t0
    return probs, grid, elapsed


def bench_strategies(base_cfg: RunConfig, data_dir: str, out_dir: str, workers: int = 1, quiet: bool = True) -> str:
    """Train the four occupancy strategies and tabulate AP/IOU/time/voxels."""
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(s, strategy_config(base_cfg, s), data_dir, out_dir) for s in STRATEGIES]
    ckpts = run_trainings(jobs, workers=workers)
    from .datagen import list_scenes

    stems = list_scenes(data_dir)
    rows = []
    for strategy in STRATEGIES:
        cfg = strategy_config(base_cfg, strategy)
        model = load_model(ckpts[strategy], cfg)
        aps, ious, times, voxels = [], [], [], []
        for i, stem in enumerate(stems):
            scene = read_scene(stem + ".txt")
            gt = read_occ1(stem + ".occ1")
            pts = sample_fixed(read_pcb1(stem + ".pcb1"), cfg.n_points, seed=31 + i).points
            result = run_inference(model, pts, seed=7 + i, n_candidates=cfg.n_candidates)
            aps.append(eval_grasp_ap(result.poses, scene, d_span=model.region_spec.d_span))
            if strategy == "global_triplane":
                probs, grid, elapsed = dense_global_query(model, pts, bounds=scene.bounds)
                times.append(elapsed)
                voxels.append(grid.resolution**3)
                if result.region is not None:
                    # region metrics cropped out of the dense prediction
                    occ = grid.lookup(probs, result.region.centers) > 0.5
                    ious.append(eval_occupancy(occ, crop_ground_truth(result.region, gt)).iou)
            elif result.region is not None:
                times.append(result.timings["query"])
                voxels.append(len(result.region))
                rep = eval_occupancy(result.prediction.probabilities, crop_ground_truth(result.region, gt))
                ious.append(rep.iou)
            else:
                times.append(result.timings["query"])
        rows.append(
            {
                "strategy": strategy,
                "oracle_ap": float(np.mean(aps)),
                "iou": float(np.mean(ious)) if ious else None,
                "query_time_s": float(np.median(times)) if times else None,
                "voxels": int(np.mean(voxels)) if voxels else None,
            }
        )
    lines = ["strategy,oracle_ap,iou,query_time_s,voxels"]
    for r in rows:
        lines.append(
            ",".join(
                [
                    r["strategy"],
                    f"{r['oracle_ap']:.9g}",
                    "" if r["iou"] is None else f"{r['iou']:.9g}",
                    "" if r["query_time_s"] is None else f"{r['query_time_s']:.9g}",
                    "" if r["voxels"] is None else str(r["voxels"]),
                ]
            )
        )
    table = "\n".join(lines) + "\n"
    with open(os.path.join(out_dir, "bench.csv"), "w", encoding="utf-8") as f:
        f.write(table)
    with open(os.path.join(out_dir, "bench.json"), "w", encoding="utf-8") as f:
        json.dump(rows, f, sort_keys=True, indent=1)
    return table
