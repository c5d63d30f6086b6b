"""Multi-task loss: L = L_o + l1*L_a + l2*L_v + l3*(L_w + L_s)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Tensor


@dataclass
class LossWeights:
    l1: float = 10.0
    l2: float = 100.0
    l3: float = 10.0

    def __post_init__(self):
        if min(self.l1, self.l2, self.l3) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    l_o: float
    l_a: float
    l_v: float
    l_w: float
    l_s: float
    total: float

    def verify(self, w: LossWeights, tol: float = 1e-9) -> bool:
        expected = self.l_o + w.l1 * self.l_a + w.l2 * self.l_v + w.l3 * (self.l_w + self.l_s)
        return abs(expected - self.total) <= tol * max(1.0, abs(expected))


def occupancy_loss(o: Tensor, o_gt) -> Tensor:
    """Mean binary cross-entropy over voxel probabilities."""
    gt = np.asarray(o_gt, dtype=np.float64).reshape(-1)
    if o.data.reshape(-1).shape[0] != gt.shape[0]:
        raise ValueError(
            f"occupancy loss length mismatch: {o.data.reshape(-1).shape[0]} vs {gt.shape[0]}"
        )
    return nn.binary_cross_entropy(nn.reshape(o, (-1,)), gt)


def smooth_l1_mean(pred: Tensor, target) -> Tensor:
    return nn.tmean(nn.smooth_l1(pred, np.asarray(target, dtype=np.float64)))


def grasp_losses(
    afford: Tensor,
    afford_gt,
    view_pre: Tensor,
    view_gt,
    cell_scores: Tensor,
    cell_score_gt,
    cell_widths: Tensor,
    cell_width_gt,
    view_post: Tensor | None = None,
):
    """(L_a, L_v, L_w, L_s) per the multi-task recipe.

    L_v averages the pre- and post-refinement view heads when both exist; the
    width loss only counts cells whose ground-truth score is positive (widths
    are expected pre-normalized by the caller, e.g. by 2r).
    """
    for t, g in ((afford, afford_gt), (view_pre, view_gt), (cell_scores, cell_score_gt), (cell_widths, cell_width_gt)):
        if t.data.shape != np.asarray(g).shape:
            raise ValueError(f"loss shape mismatch: {t.data.shape} vs {np.asarray(g).shape}")
    l_a = nn.binary_cross_entropy(afford, np.asarray(afford_gt, dtype=np.float64))
    l_v = smooth_l1_mean(view_pre, view_gt)
    if view_post is not None:
        l_v = nn.mul(nn.add(l_v, smooth_l1_mean(view_post, view_gt)), 0.5)
    l_s = smooth_l1_mean(cell_scores, cell_score_gt)
    mask = np.flatnonzero(np.asarray(cell_score_gt).reshape(-1) > 0)
    if mask.size:
        pred_w = nn.gather_rows(nn.reshape(cell_widths, (-1,)), mask)
        l_w = smooth_l1_mean(pred_w, np.asarray(cell_width_gt).reshape(-1)[mask])
    else:
        l_w = nn.tensor(0.0)
    return l_a, l_v, l_w, l_s


def total_loss(l_o: Tensor, l_a: Tensor, l_v: Tensor, l_w: Tensor, l_s: Tensor, w: LossWeights):
    """Weighted sum tensor plus the matching (recomputed) LossReport."""
    total = nn.add(
        l_o,
        nn.add(
            nn.mul(l_a, w.l1),
            nn.add(nn.mul(l_v, w.l2), nn.mul(nn.add(l_w, l_s), w.l3)),
        ),
    )
    report = LossReport(
        l_o=float(l_o.data),
        l_a=float(l_a.data),
        l_v=float(l_v.data),
        l_w=float(l_w.data),
        l_s=float(l_s.data),
        total=float(total.data),
    )
    return total, report
