"""Scene-level forward passes: training losses and the inference pipeline."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import rotation_from_direction
from .grasp import (
    GraspPose,
    LocalShapeInput,
    affordance_area,
    affordance_head,
    collision_filter,
    decode_pose,
    extract_shape_feature,
    implicit_shape_feature,
    pose_nms,
    run_set_abstraction_batch,
    sample_candidates,
    view_affordance_head,
)
from .losses import LossWeights, grasp_losses, occupancy_loss, total_loss
from .model import GraspOccModel
from .occupancy import (
    OccupancyPrediction,
    assemble_query_features,
    build_region,
    crop_ground_truth,
    cylinder_mask,
    decode_occupancy,
    sample_training_voxels,
)
from .pointcloud import PointCloud, add_gaussian_noise, isotropic_workspace_affine, rng_from
from .scenes import OccupancyGrid, SdfScene
from .triplane import build_triplanes, encode_planes, encode_points


@dataclass
class SceneLabels:
    sample_idx: np.ndarray  # indices into the stored full cloud
    afford_idx: np.ndarray  # indices into the sampled cloud
    afford: np.ndarray  # (L,) bool
    pool_idx: np.ndarray  # (P,) indices into the sampled cloud
    v_gt: np.ndarray  # (P, V)
    success: np.ndarray  # (P, V, 48) uint8
    widths: np.ndarray  # (P, V, 48) meters


@dataclass
class TrainScene:
    points: np.ndarray  # sampled training cloud, world frame
    gt: OccupancyGrid
    labels: SceneLabels
    scene: SdfScene | None = None


@dataclass
class EncodedScene:
    points: np.ndarray
    affine: object
    norm_points: np.ndarray
    embeddings: nn.Tensor
    stack: object | None
    afford_probs: nn.Tensor


def encode_scene(model: GraspOccModel, points: np.ndarray) -> EncodedScene:
    """Embeddings, tri-plane stack and affordance probabilities for one cloud."""
    cfg = model.cfg
    cloud = PointCloud(points)
    affine = isotropic_workspace_affine(cloud, pad=model.norm_pad)
    norm = affine.apply(cloud.points)
    emb = encode_points(model.point_encoder, norm, neighborhood_voxel=0.005 * affine.scale[0])
    stack = None
    if cfg.use_global_context:
        stack = build_triplanes(norm, emb, model.frames, cfg.plane_h, cfg.plane_w)
        encode_planes(stack, model.plane_encoders, use_density=cfg.use_density)
    afford = affordance_head(emb, model.afford_head)
    return EncodedScene(
        points=cloud.points, affine=affine, norm_points=norm, embeddings=emb,
        stack=stack, afford_probs=afford,
    )


def _shape_inputs_occ(centers, feats, occupied_mask, cand_pos, cand_rots, spec):
    """Per-candidate (P_o, F_o row indices) from predicted-occupied voxels."""
    occ_idx = np.flatnonzero(occupied_mask)
    occ_centers = centers[occ_idx]
    out = []
    for pos, rot in zip(cand_pos, cand_rots):
        if occ_centers.shape[0]:
            inside = cylinder_mask(occ_centers, pos, rot, spec)
            out.append((occ_centers[inside], occ_idx[inside]))
        else:
            out.append((np.zeros((0, 3)), np.zeros(0, dtype=np.intp)))
    return out


def _shape_inputs_observed(points, embeddings_rows_src, cand_pos, cand_rots, spec):
    out = []
    for pos, rot in zip(cand_pos, cand_rots):
        inside = cylinder_mask(points, pos, rot, spec)
        rows = np.flatnonzero(inside)
        out.append((points[rows], rows))
    return out


def _batched_shape_features(model: GraspOccModel, inputs, feat_source: nn.Tensor, seed: int):
    """Shape feature rows (P, shape_dim); empty regions yield zero rows."""
    cfg = model.cfg
    live = [(i, pts, rows) for i, (pts, rows) in enumerate(inputs) if pts.shape[0] > 0]
    feats_rows = [None] * len(inputs)
    if live:
        explicit = run_set_abstraction_batch(model.sa, [(pts, None) for _, pts, _ in live])
        if cfg.implicit_mode == "set_abstraction":
            implicit = run_set_abstraction_batch(
                model.implicit_sa,
                [(pts, nn.gather_rows(feat_source, rows)) for _, pts, rows in live],
            )
        elif cfg.implicit_mode == "maxpool":
            implicit = [
                implicit_shape_feature(
                    nn.gather_rows(feat_source, rows), cfg.key_k, seed + 31 * i
                )
                for i, _, rows in live
            ]
        else:
            implicit = None
        for slot, (i, _, _) in enumerate(live):
            if implicit is None:
                feats_rows[i] = explicit[slot]
            else:
                feats_rows[i] = nn.concat([explicit[slot], implicit[slot]], axis=1)
    zero = None
    for i in range(len(inputs)):
        if feats_rows[i] is None:
            if zero is None:
                zero = nn.tensor(np.zeros((1, model.shape_dim)))
            feats_rows[i] = zero
    return nn.concat(feats_rows, axis=0)


def _pose_heads(model: GraspOccModel, shape_feats: nn.Tensor):
    """(scores Tensor (P,48), widths Tensor (P,48) in meters)."""
    out = model.pose_head(shape_feats)
    scores = nn.sigmoid(nn.slice_cols(out, 0, 48))
    widths = nn.mul(nn.sigmoid(nn.slice_cols(out, 48, 96)), 2 * model.cfg.gripper_radius)
    return scores, widths


def scene_training_loss(model: GraspOccModel, ts: TrainScene, step_seed: int, cfg):
    """All loss parts for one scene at one step.

    Candidates snap to the precomputed label pool; occupancy is trained on a
    voxel subsample of the union region; the refinement pass re-crops the
    already-predicted occupied voxels without new queries.
    """
    rng = rng_from(cfg.seed, 0x11, step_seed)
    input_pts = ts.points
    if cfg.noise_sigma > 0 and cfg.noise_frac > 0:
        noisy = add_gaussian_noise(
            PointCloud(ts.points), cfg.noise_sigma, cfg.noise_frac, seed=int(rng.integers(2**31))
        )
        input_pts = noisy.points
    enc = encode_scene(model, input_pts)
    lab = ts.labels

    afford_rows = nn.gather_rows(enc.afford_probs, lab.afford_idx)
    afford_gt = lab.afford.astype(np.float64)

    zero = nn.tensor(0.0)
    l_o = l_v = l_w = l_s = zero
    view_pre = view_post = None
    if lab.pool_idx.size:
        area = affordance_area(enc.afford_probs.data)
        rows_avail = np.flatnonzero(area[lab.pool_idx])
        if rows_avail.size == 0:
            rows_avail = np.arange(lab.pool_idx.size)
        pick = rng.choice(rows_avail.size, size=cfg.train_candidates,
                          replace=rows_avail.size < cfg.train_candidates)
        rows = rows_avail[pick]
        cand_point_idx = lab.pool_idx[rows]
        cand_pos = ts.points[cand_point_idx]  # clean label positions
        cand_emb = nn.gather_rows(enc.embeddings, cand_point_idx)

        view_pre = view_affordance_head(cand_emb, model.view_head)
        v_gt_rows = lab.v_gt[rows]
        chosen = np.argmax(view_pre.data, axis=1)
        rots = np.stack([rotation_from_direction(model.directions[c]) for c in chosen])

        region = build_region(list(zip(cand_pos, rots)), model.region_spec)
        o_gt_full = crop_ground_truth(region, ts.gt)
        _, sub_centers, sub_gt = sample_training_voxels(
            region, o_gt_full, cfg.occ_samples, seed=int(rng.integers(2**31))
        )
        cand_norm = enc.affine.apply(cand_pos)
        if cfg.use_occupancy:
            feats = assemble_query_features(
                enc.affine.apply(sub_centers), enc.stack,
                (model.e1, model.e2), cand_norm, cand_emb, model.pe, model.feature_mode,
            )
            probs = decode_occupancy(feats, model.occ_decoder)
            l_o = occupancy_loss(probs, sub_gt)
            occupied = probs.data > 0.5
            shape_in = _shape_inputs_occ(sub_centers, feats, occupied, cand_pos, rots, model.region_spec)
            feat_source = feats
        else:
            shape_in = _shape_inputs_observed(enc.points, enc.embeddings, cand_pos, rots, model.region_spec)
            feat_source = enc.embeddings

        shape_feats = _batched_shape_features(model, shape_in, feat_source, seed=step_seed)
        final_dirs = chosen
        if cfg.use_refinement:
            view_post = nn.sigmoid(model.refine_view_head(shape_feats))
            final_dirs = np.argmax(view_post.data, axis=1)
        # exploration: decode (and supervise) some candidates at a direction the
        # oracle labels as workable, so the 48-cell heads see positive rows early
        if cfg.explore_frac > 0:
            final_dirs = final_dirs.copy()
            for i, row in enumerate(rows):
                good = np.flatnonzero(lab.v_gt[row] > 0)
                if good.size and rng.random() < cfg.explore_frac:
                    final_dirs[i] = int(good[rng.integers(good.size)])
        if cfg.use_refinement or cfg.explore_frac > 0:
            new_rots = np.stack([rotation_from_direction(model.directions[c]) for c in final_dirs])
            if cfg.use_occupancy:
                shape_in2 = _shape_inputs_occ(sub_centers, feats, occupied, cand_pos, new_rots, model.region_spec)
            else:
                shape_in2 = _shape_inputs_observed(enc.points, enc.embeddings, cand_pos, new_rots, model.region_spec)
            shape_feats = _batched_shape_features(model, shape_in2, feat_source, seed=step_seed + 1)

        scores, widths = _pose_heads(model, shape_feats)
        score_gt = lab.success[rows, final_dirs].astype(np.float64)
        width_gt = lab.widths[rows, final_dirs].astype(np.float64)
        l_a, l_v, l_w, l_s = grasp_losses(
            afford_rows, afford_gt,
            view_pre, v_gt_rows,
            scores, score_gt,
            nn.mul(widths, 1.0 / (2 * cfg.gripper_radius)), width_gt / (2 * cfg.gripper_radius),
            view_post=view_post,
        )
    else:
        l_a = nn.binary_cross_entropy(afford_rows, afford_gt)
    return {"l_o": l_o, "l_a": l_a, "l_v": l_v, "l_w": l_w, "l_s": l_s}


def batch_training_loss(model: GraspOccModel, scenes, step: int, cfg, weights: LossWeights):
    """Mean loss over the step's scene batch; returns (loss Tensor, LossReport)."""
    parts = {k: [] for k in ("l_o", "l_a", "l_v", "l_w", "l_s")}
    for slot, ts in enumerate(scenes):
        p = scene_training_loss(model, ts, step_seed=step * 1009 + slot, cfg=cfg)
        for k in parts:
            parts[k].append(p[k])
    agg = {}
    for k, terms in parts.items():
        s = terms[0]
        for t in terms[1:]:
            s = nn.add(s, t)
        agg[k] = nn.mul(s, 1.0 / len(terms)) if len(terms) > 1 else s
    return total_loss(agg["l_o"], agg["l_a"], agg["l_v"], agg["l_w"], agg["l_s"], weights)


@dataclass
class InferenceResult:
    poses: list
    region: object | None
    prediction: OccupancyPrediction | None
    timings: dict = field(default_factory=dict)
    candidates: np.ndarray | None = None

    @property
    def occupied_voxels(self) -> np.ndarray:
        if self.region is None or self.prediction is None:
            return np.zeros((0, 3), dtype=np.int64)
        return self.region.voxels[self.prediction.occupied]


def run_inference(
    model: GraspOccModel,
    points: np.ndarray,
    seed: int = 0,
    top: int = 50,
    nms_radius: float = 0.03,
    use_collision_filter: bool = True,
    n_candidates: int | None = None,
) -> InferenceResult:
    """Full pipeline on one cloud: candidates, regions, occupancy, poses."""
    cfg = model.cfg
    timings = {}
    with nn.no_grad():
        t0 = time.perf_counter()
        cloud = PointCloud(points)
        affine = isotropic_workspace_affine(cloud, pad=model.norm_pad)
        norm = affine.apply(cloud.points)
        emb = encode_points(model.point_encoder, norm, neighborhood_voxel=0.005 * affine.scale[0])
        afford = affordance_head(emb, model.afford_head)
        t1 = time.perf_counter()
        timings["encode"] = t1 - t0
        stack = None
        if cfg.use_global_context:
            stack = build_triplanes(norm, emb, model.frames, cfg.plane_h, cfg.plane_w)
            encode_planes(stack, model.plane_encoders, use_density=cfg.use_density)
        t2 = time.perf_counter()
        timings["planes"] = t2 - t1

        n_cand = n_candidates if n_candidates is not None else cfg.n_candidates
        cand_idx = sample_candidates(cloud.points, affordance_area(afford.data), n_cand, seed)
        uniq_idx = np.unique(cand_idx)
        cand_pos = cloud.points[uniq_idx]
        cand_emb = nn.gather_rows(emb, uniq_idx)
        view = view_affordance_head(cand_emb, model.view_head)
        chosen = np.argmax(view.data, axis=1)
        rots = np.stack([rotation_from_direction(model.directions[c]) for c in chosen])
        region = None
        prediction = None
        feats = None
        if cfg.use_occupancy:
            region = build_region(list(zip(cand_pos, rots)), model.region_spec)
            feats = assemble_query_features(
                affine.apply(region.centers), stack, (model.e1, model.e2),
                affine.apply(cand_pos), cand_emb, model.pe, model.feature_mode,
            )
            probs = decode_occupancy(feats, model.occ_decoder).data
            prediction = OccupancyPrediction(probabilities=probs, occupied=probs > 0.5)
        t3 = time.perf_counter()
        timings["query"] = t3 - t2

        if cfg.use_occupancy:
            shape_in = _shape_inputs_occ(
                region.centers, feats, prediction.occupied, cand_pos, rots, model.region_spec
            )
            feat_source = feats
        else:
            shape_in = _shape_inputs_observed(cloud.points, emb, cand_pos, rots, model.region_spec)
            feat_source = emb
        shape_feats = _batched_shape_features(model, shape_in, feat_source, seed=seed)
        final_rots = rots
        if cfg.use_refinement:
            refine = nn.sigmoid(model.refine_view_head(shape_feats))
            refined = np.argmax(refine.data, axis=1)
            final_rots = np.stack([rotation_from_direction(model.directions[c]) for c in refined])
            if cfg.use_occupancy:
                shape_in = _shape_inputs_occ(
                    region.centers, feats, prediction.occupied, cand_pos, final_rots, model.region_spec
                )
            else:
                shape_in = _shape_inputs_observed(cloud.points, emb, cand_pos, final_rots, model.region_spec)
            shape_feats = _batched_shape_features(model, shape_in, feat_source, seed=seed + 1)

        scores, widths = _pose_heads(model, shape_feats)
        poses = []
        for i in range(cand_pos.shape[0]):
            cell = int(np.argmax(scores.data[i]))
            poses.append(
                GraspPose(
                    p_g=cand_pos[i],
                    rotation=final_rots[i],
                    rot_idx=cell // 4,
                    depth_idx=cell % 4,
                    width=float(widths.data[i, cell]),
                    score=float(scores.data[i, cell]),
                )
            )
        poses = pose_nms(poses, radius=nms_radius, top=top)
        if use_collision_filter and cfg.use_occupancy:
            occupied_voxels = region.voxels[prediction.occupied]
            poses = collision_filter(poses, occupied_voxels, model.region_spec)
        t4 = time.perf_counter()
        timings["decode"] = t4 - t3
        timings["total"] = t4 - t0
    return InferenceResult(
        poses=poses, region=region, prediction=prediction, timings=timings, candidates=uniq_idx
    )
