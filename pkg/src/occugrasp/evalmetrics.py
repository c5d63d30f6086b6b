"""Occupancy metrics and the oracle-based grasp AP."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .oracle import oracle_batch
from .scenes import SdfScene

FRICTION_SET = (0.2, 0.4, 0.6, 0.8, 1.0, 1.2)


@dataclass
class MetricReport:
    iou: float
    f1: float
    precision: float
    recall: float
    tp: int = 0
    fp: int = 0
    fn: int = 0


def eval_occupancy(pred, gt) -> MetricReport:
    """Counts over region voxels at the 0.5 threshold.

    ``pred`` may be probabilities or a boolean mask; empty-vs-empty scores 0.
    """
    pred = np.asarray(pred)
    occupied = pred > 0.5 if pred.dtype != bool else pred
    gt = np.asarray(gt, dtype=bool)
    if occupied.shape != gt.shape:
        raise ValueError("prediction/ground-truth length mismatch")
    tp = int(np.sum(occupied & gt))
    fp = int(np.sum(occupied & ~gt))
    fn = int(np.sum(~occupied & gt))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    iou = tp / (tp + fp + fn) if tp + fp + fn else 0.0
    return MetricReport(iou=iou, f1=f1, precision=precision, recall=recall, tp=tp, fp=fp, fn=fn)


def pose_success_mu(scene: SdfScene, poses, d_span: float = 0.05):
    """Minimal friction mu* per pose (inf = never succeeds), one oracle pass."""
    if not poses:
        return np.zeros(0)
    p = np.stack([pose.p_g for pose in poses])
    rot = np.stack([pose.full_rotation() for pose in poses])
    depths = np.array([pose.depth_m for pose in poses])
    widths = np.array([pose.width for pose in poses])
    mu_star, _, feasible = oracle_batch(scene, p, rot, depths, widths, d_span=d_span)
    mu_star = mu_star.copy()
    mu_star[~feasible] = np.inf
    return mu_star


def precision_at_k(success: np.ndarray) -> np.ndarray:
    """Precision@k for k = 1..len(success) over a ranked success vector."""
    k = np.arange(1, success.size + 1)
    return np.cumsum(success.astype(np.float64)) / k


def eval_grasp_ap(poses, scene: SdfScene, mus=FRICTION_SET, top: int = 50, d_span: float = 0.05) -> float:
    """Mean over friction coefficients of mean Precision@k on the top-``top`` poses."""
    ranked = sorted(poses, key=lambda p: -p.score)[:top]
    if not ranked:
        warnings.warn("eval_grasp_ap: empty pose list, AP = 0")
        return 0.0
    mu_star = pose_success_mu(scene, ranked, d_span=d_span)
    ap_per_mu = [float(np.mean(precision_at_k(mu_star <= mu))) for mu in mus]
    return float(np.mean(ap_per_mu))
