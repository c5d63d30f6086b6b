"""Dataset generation: scenes, rendered clouds, GT occupancy and oracle labels.

All per-scene artifacts are pure functions of (master seed, scene index), so
parallel generation is deterministic and repeated runs are byte-identical.
"""

from __future__ import annotations

import json
import multiprocessing as mp
import os
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import grasp_direction_set
from .oracle import affordance_labels, pool_label_tables
from .pipeline import SceneLabels, TrainScene
from .pointcloud import (
    PointCloud,
    add_gaussian_noise,
    farthest_point_sample,
    read_pcb1,
    rng_from,
    write_pcb1,
)
from .render import render_scene_cloud
from .scenes import ground_truth_occupancy, random_scene, read_occ1, read_scene, write_occ1, write_scene

LBL_MAGIC = b"LBL1"


def write_labels(path, arrays: dict):
    """Deterministic multi-array container (JSON header + raw little-endian data)."""
    header = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        dt = a.dtype.newbyteorder("<")
        blob = a.astype(dt).tobytes()
        header[name] = {"dtype": dt.str, "shape": list(a.shape), "offset": offset}
        blobs.append(blob)
        offset += len(blob)
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(LBL_MAGIC)
        f.write(struct.pack("<I", len(hdr)))
        f.write(hdr)
        for blob in blobs:
            f.write(blob)


def read_labels(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != LBL_MAGIC:
        raise ValueError("not a LBL1 file")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    base = 8 + hlen
    out = {}
    for name, spec in header.items():
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        a = np.frombuffer(raw, dtype=dt, count=count, offset=base + spec["offset"])
        out[name] = a.reshape(spec["shape"]).copy()
    return out


@dataclass
class GenParams:
    n_scenes: int
    seed: int
    views: int = 1
    noise_sigma: float = 0.0
    noise_frac: float = 0.0
    n_points: int = 2048
    label_points: int = 1024
    pool_size: int = 32
    v_dirs: int = 60
    voxel_size: float = 0.01
    with_labels: bool = True


def scene_seed(master: int, index: int) -> int:
    return master * 1_000_003 + index


def sample_indices(n_total: int, n: int, seed: int) -> np.ndarray:
    """The index stream behind pointcloud.sample_fixed, exposed for labelling."""
    rng = rng_from(seed, 0xF1)
    return rng.choice(n_total, size=n, replace=n_total < n)


def _balanced_affordance_labels(scene, pts: np.ndarray, n: int, rng):
    """(label indices, bits) with positives capped at half the label budget.

    All off-table points (up to the budget) are oracle-tested; keeping every
    positive plus an equal-or-larger slice of negatives stops the affordance
    head from collapsing to the majority class.
    """
    off = np.flatnonzero(pts[:, 2] > scene.table_height + 0.008)
    on = np.setdiff1d(np.arange(pts.shape[0]), off)
    test = off if off.size <= n else rng.choice(off, size=n, replace=False)
    bits = affordance_labels(scene, pts[test])
    pos = test[bits]
    neg_off = test[~bits]
    if pos.size > n // 2:
        pos = rng.choice(pos, size=n // 2, replace=False)
    budget = n - pos.size
    n_neg_off = min(neg_off.size, int(round(budget * 0.7)))
    neg = [rng.choice(neg_off, size=n_neg_off, replace=False)] if n_neg_off else []
    n_on = min(on.size, budget - n_neg_off)
    if n_on:
        neg.append(rng.choice(on, size=n_on, replace=False))
    n_neg = sum(a.size for a in neg)
    # oversample positive rows toward parity so mean BCE sees balanced mass
    if pos.size and n_neg > 2 * pos.size:
        pos_rows = np.repeat(pos, min(int(round(0.5 * n_neg / pos.size)), 32))
    else:
        pos_rows = pos
    idx = np.concatenate([pos_rows] + neg) if (pos_rows.size or neg) else np.zeros(0, dtype=np.intp)
    labels = np.concatenate([np.ones(pos_rows.size, bool), np.zeros(idx.size - pos_rows.size, bool)])
    order = np.argsort(idx, kind="stable")
    return idx[order], labels[order], pos


def generate_scene(out_dir, index: int, p: GenParams):
    """All artifacts of one scene; returns the written file paths."""
    sid = scene_seed(p.seed, index)
    scene = random_scene(sid)
    cloud = render_scene_cloud(scene, p.views, seed=sid)
    if p.noise_sigma > 0 and p.noise_frac > 0:
        cloud = add_gaussian_noise(cloud, p.noise_sigma, p.noise_frac, seed=sid)
    gt = ground_truth_occupancy(scene, p.voxel_size)

    stem = os.path.join(out_dir, f"scene_{index:04d}")
    write_scene(stem + ".txt", scene)
    write_pcb1(stem + ".pcb1", cloud)
    write_occ1(stem + ".occ1", gt)

    if p.with_labels:
        sample_idx = sample_indices(len(cloud), p.n_points, seed=sid)
        pts = cloud.points[sample_idx]
        rng = rng_from(sid, 0x1B)
        afford_idx, afford, positives = _balanced_affordance_labels(scene, pts, p.label_points, rng)
        if positives.size:
            k = min(p.pool_size, positives.size)
            pool_idx = positives[farthest_point_sample(pts[positives], k)]
            dirs = grasp_direction_set(p.v_dirs)
            success, widths = pool_label_tables(scene, pts[pool_idx], dirs)
            v_gt = success.astype(np.float64).mean(axis=2)
        else:
            pool_idx = np.zeros(0, dtype=np.int64)
            success = np.zeros((0, p.v_dirs, 48), dtype=np.uint8)
            widths = np.zeros((0, p.v_dirs, 48), dtype=np.float32)
            v_gt = np.zeros((0, p.v_dirs))
        write_labels(
            stem + ".lbl1",
            {
                "sample_idx": sample_idx.astype(np.int64),
                "afford_idx": afford_idx.astype(np.int64),
                "afford": afford.astype(np.uint8),
                "pool_idx": pool_idx.astype(np.int64),
                "v_gt": v_gt,
                "success": success,
                "widths": widths.astype(np.float32),
            },
        )
    return stem


def _gen_worker(args):
    from .training import limit_blas_threads

    out_dir, index, p = args
    with limit_blas_threads(1):
        generate_scene(out_dir, index, p)
    return index


def generate_dataset(out_dir, p: GenParams, workers: int = 1):
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(out_dir, i, p) for i in range(p.n_scenes)]
    if workers > 1 and p.n_scenes > 1:
        with mp.Pool(min(workers, p.n_scenes)) as pool:
            list(pool.imap_unordered(_gen_worker, jobs))
    else:
        for job in jobs:
            _gen_worker(job)
    meta = {
        "n_scenes": p.n_scenes,
        "seed": p.seed,
        "views": p.views,
        "noise_sigma": p.noise_sigma,
        "noise_frac": p.noise_frac,
        "n_points": p.n_points,
        "label_points": p.label_points,
        "pool_size": p.pool_size,
        "v_dirs": p.v_dirs,
        "voxel_size": p.voxel_size,
        "with_labels": p.with_labels,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=0)
        f.write("\n")


def read_meta(data_dir) -> dict:
    with open(os.path.join(data_dir, "meta.json"), "r", encoding="utf-8") as f:
        return json.load(f)


def list_scenes(data_dir) -> list:
    stems = sorted(
        os.path.join(data_dir, f[:-4])
        for f in os.listdir(data_dir)
        if f.startswith("scene_") and f.endswith(".txt")
    )
    if not stems:
        raise FileNotFoundError(f"no scene files in {data_dir}")
    return stems


def load_train_scene(stem: str) -> TrainScene:
    cloud = read_pcb1(stem + ".pcb1")
    gt = read_occ1(stem + ".occ1")
    raw = read_labels(stem + ".lbl1")
    labels = SceneLabels(
        sample_idx=raw["sample_idx"],
        afford_idx=raw["afford_idx"],
        afford=raw["afford"].astype(bool),
        pool_idx=raw["pool_idx"],
        v_gt=raw["v_gt"],
        success=raw["success"],
        widths=raw["widths"].astype(np.float64),
    )
    scene = read_scene(stem + ".txt")
    return TrainScene(points=cloud.points[labels.sample_idx], gt=gt, labels=labels, scene=scene)
