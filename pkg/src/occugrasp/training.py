"""End-to-end training over synthetic scenes and checkpoint evaluation."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .config import RunConfig
from .datagen import list_scenes, load_train_scene, read_meta
from .evalmetrics import eval_grasp_ap, eval_occupancy
from .losses import LossWeights
from .model import GraspOccModel
from .nn import AdamState, backward, flatten_grads, flatten_params, load_checkpoint, save_checkpoint, zero_grads
from .occupancy import crop_ground_truth
from .pipeline import batch_training_loss, run_inference
from .pointcloud import PointCloud, add_gaussian_noise, rng_from, sample_fixed


class TrainDiverged(RuntimeError):
    pass


def limit_blas_threads(n: int = 1):
    """Pin BLAS pools; the engine's small GEMMs lose to multithread sync."""
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=n)
    except ImportError:  # perf-only concern, results are unaffected
        import contextlib

        return contextlib.nullcontext()


@dataclass
class TrainResult:
    checkpoint: str
    reports: list
    final_step: int


def _dataset_consistency(cfg: RunConfig, meta: dict):
    if meta.get("v_dirs") != cfg.v_dirs:
        raise ValueError(
            f"dataset labelled with v_dirs={meta.get('v_dirs')}, config wants {cfg.v_dirs}"
        )
    if meta.get("n_points") != cfg.n_points:
        raise ValueError(
            f"dataset sampled at n_points={meta.get('n_points')}, config wants {cfg.n_points}"
        )
    if not meta.get("with_labels", False):
        raise ValueError("training requires a dataset generated with labels")


def train(
    cfg: RunConfig,
    data_dir: str,
    out_dir: str,
    resume: str | None = None,
    quiet: bool = True,
) -> TrainResult:
    """Adam-optimize the full model; deterministic per (cfg.seed, dataset).

    Per-step randomness is keyed by the step index, so resuming from a
    checkpoint reproduces the uninterrupted run bit for bit.
    """
    with limit_blas_threads(1):
        return _train_inner(cfg, data_dir, out_dir, resume, quiet)


def _train_inner(cfg, data_dir, out_dir, resume, quiet) -> TrainResult:
    os.makedirs(out_dir, exist_ok=True)
    meta = read_meta(data_dir)
    _dataset_consistency(cfg, meta)
    stems = list_scenes(data_dir)
    cache: dict = {}

    def scene(i):
        if i not in cache:
            cache[i] = load_train_scene(stems[i])
        return cache[i]

    model = GraspOccModel(cfg)
    params = model.params()
    adam = AdamState.fresh(model.n_params)
    if resume is not None:
        desc, flat, saved_adam = load_checkpoint(resume)
        model.check_descriptor(desc)
        model.load_flat(flat)
        if saved_adam is not None:
            adam = saved_adam
    weights = LossWeights()
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    log_path = os.path.join(out_dir, "train_log.jsonl")
    log_mode = "a" if resume is not None else "w"
    reports = []
    last_good = flatten_params(params)
    last_good_adam = adam

    with open(log_path, log_mode, encoding="utf-8") as log:
        step = adam.t
        while step < cfg.steps:
            pick = rng_from(cfg.seed, 0x57, step)
            idxs = pick.choice(len(stems), size=cfg.batch_size, replace=len(stems) < cfg.batch_size)
            batch = [scene(int(i)) for i in idxs]
            loss, report = batch_training_loss(model, batch, step, cfg, weights)
            if not np.isfinite(report.total):
                save_checkpoint(ckpt_path, model.descriptor(), last_good, last_good_adam)
                raise TrainDiverged(f"diverged at step {step}: non-finite loss")
            zero_grads(params)
            backward(loss)
            grads = flatten_grads(params)
            flat = flatten_params(params)
            try:
                new_flat, adam = nn.sgd_adam_step(flat, grads, adam, cfg.lr)
            except FloatingPointError as e:
                save_checkpoint(ckpt_path, model.descriptor(), last_good, last_good_adam)
                raise TrainDiverged(f"diverged at step {step}: {e}") from e
            model.load_flat(new_flat)
            last_good, last_good_adam = new_flat, adam
            reports.append(report)
            step += 1
            if step % cfg.report_every == 0 or step == cfg.steps:
                entry = {"step": step, **{k: round(v, 9) for k, v in asdict(report).items()}}
                log.write(json.dumps(entry, sort_keys=True) + "\n")
                log.flush()
                if not quiet:
                    print(f"step {step}: total={report.total:.4f} l_o={report.l_o:.4f}", flush=True)
    save_checkpoint(ckpt_path, model.descriptor(), flatten_params(params), adam)
    return TrainResult(checkpoint=ckpt_path, reports=reports, final_step=cfg.steps)


def load_model(ckpt_path: str, cfg: RunConfig) -> GraspOccModel:
    desc, flat, _ = load_checkpoint(ckpt_path)
    model = GraspOccModel(cfg)
    model.check_descriptor(desc)
    model.load_flat(flat)
    return model


@dataclass
class SceneEval:
    index: int
    iou: float | None
    f1: float | None
    precision: float | None
    recall: float | None
    ap: float
    n_region_voxels: int


def evaluate_scenes(
    model: GraspOccModel,
    data_dir: str,
    seed: int = 0,
    noise_sigma: float = 0.0,
    noise_frac: float = 0.0,
    views: int | None = None,
    with_ap: bool = True,
    n_candidates: int | None = None,
    collision: bool = True,
) -> list:
    """Per-scene occupancy metrics and oracle AP on a generated dataset.

    Multi-view evaluation re-renders the stored scene with the requested view
    count (the stored cloud is the dataset's own view setting).
    """
    from .render import render_scene_cloud
    from .scenes import read_occ1, read_scene
    from .pointcloud import read_pcb1
    from .datagen import scene_seed

    cfg = model.cfg
    meta = read_meta(data_dir)
    stems = list_scenes(data_dir)
    out = []
    with limit_blas_threads(1):
        for i, stem in enumerate(stems):
            scene = read_scene(stem + ".txt")
            gt = read_occ1(stem + ".occ1")
            if views is None or views == meta.get("views", 1):
                cloud = read_pcb1(stem + ".pcb1")
            else:
                cloud = render_scene_cloud(scene, views, seed=scene_seed(meta["seed"], i))
            pts = sample_fixed(cloud, cfg.n_points, seed=seed * 7919 + i)
            if noise_sigma > 0 and noise_frac > 0:
                pts = add_gaussian_noise(pts, noise_sigma, noise_frac, seed=seed * 104729 + i)
            result = run_inference(
                model, pts.points, seed=seed * 13 + i, n_candidates=n_candidates, use_collision_filter=collision
            )
            iou = f1 = precision = recall = None
            n_vox = 0
            if result.region is not None:
                o_gt = crop_ground_truth(result.region, gt)
                rep = eval_occupancy(result.prediction.probabilities, o_gt)
                iou, f1, precision, recall = rep.iou, rep.f1, rep.precision, rep.recall
                n_vox = len(result.region)
            ap = eval_grasp_ap(result.poses, scene, d_span=model.region_spec.d_span) if with_ap else 0.0
            out.append(
                SceneEval(index=i, iou=iou, f1=f1, precision=precision, recall=recall, ap=ap, n_region_voxels=n_vox)
            )
    return out


def aggregate_evals(evals: list) -> dict:
    """Plain means; occupancy means skip scenes without a region."""
    occ = [e for e in evals if e.iou is not None]
    agg = {
        "ap": float(np.mean([e.ap for e in evals])) if evals else 0.0,
        "iou": float(np.mean([e.iou for e in occ])) if occ else None,
        "f1": float(np.mean([e.f1 for e in occ])) if occ else None,
        "precision": float(np.mean([e.precision for e in occ])) if occ else None,
        "recall": float(np.mean([e.recall for e in occ])) if occ else None,
        "n_scenes": len(evals),
    }
    return agg
