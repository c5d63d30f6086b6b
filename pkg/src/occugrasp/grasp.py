"""Grasp candidate handling, shape feature extraction and pose decoding.

Grasp frame convention: R_g's third column is the approach direction, the
first column is the closing axis; the in-plane rotation spins the closing
axis about the approach by idx*15 degrees, depth is (idx+1) cm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import matrix_to_quat, rotation_about_z, rotation_from_direction
from .nn import Tensor
from .occupancy import GraspRegionSpec
from .oracle import FINGER_HALF_Y, FINGER_THICKNESS, PALM_DEPTH
from .pointcloud import farthest_point_sample, rng_from

N_ROTATIONS = 12
N_DEPTHS = 4
N_CELLS = N_ROTATIONS * N_DEPTHS


@dataclass
class GraspCandidate:
    p_g: np.ndarray  # (3,) meters
    directions: np.ndarray  # (V, 3) unit vectors
    view_affordance: np.ndarray  # (V,)
    chosen: int
    rotation: np.ndarray = field(init=False)  # maps +z to the chosen direction

    def __post_init__(self):
        self.p_g = np.asarray(self.p_g, dtype=np.float64).reshape(3)
        self.directions = np.asarray(self.directions, dtype=np.float64)
        self.view_affordance = np.asarray(self.view_affordance, dtype=np.float64)
        if self.chosen != int(np.argmax(self.view_affordance)):
            raise ValueError("chosen index must be the affordance argmax")
        self.rotation = rotation_from_direction(self.directions[self.chosen])


@dataclass
class GraspPose:
    p_g: np.ndarray
    rotation: np.ndarray  # direction frame R_g
    rot_idx: int
    depth_idx: int
    width: float
    score: float

    def __post_init__(self):
        self.p_g = np.asarray(self.p_g, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not 0 <= self.rot_idx < N_ROTATIONS:
            raise ValueError("in-plane rotation index out of range")
        if not 0 <= self.depth_idx < N_DEPTHS:
            raise ValueError("depth index out of range")

    @property
    def depth_m(self) -> float:
        return 0.01 * (self.depth_idx + 1)

    @property
    def angle(self) -> float:
        return np.deg2rad(15.0 * self.rot_idx)

    def full_rotation(self) -> np.ndarray:
        return self.rotation @ rotation_about_z(self.angle)


def affordance_head(embeddings: Tensor, head) -> Tensor:
    """Per-point grasp affordance probability (2-layer MLP + sigmoid)."""
    return nn.sigmoid(nn.reshape(head(embeddings), (-1,)))


def affordance_area(probabilities: np.ndarray) -> np.ndarray:
    """Segmentation at the strict 0.5 threshold."""
    return np.asarray(probabilities) > 0.5


def sample_candidates(cloud_points: np.ndarray, affordance: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Indices of n candidate grasp points drawn from the affordance area.

    Falls back to the whole cloud when the area is empty; samples with
    replacement when the area is smaller than n.
    """
    pts = np.asarray(cloud_points)
    if pts.shape[0] == 0:
        raise ValueError("empty cloud")
    area = np.flatnonzero(np.asarray(affordance, dtype=bool))
    if area.size == 0:
        area = np.arange(pts.shape[0])
    rng = rng_from(seed, 0xCD)
    return area[rng.choice(area.size, size=n, replace=area.size < n)]


def view_affordance_head(embeddings_at_candidates: Tensor, head) -> Tensor:
    """V sigmoided view-affordance scores per candidate row."""
    return nn.sigmoid(head(embeddings_at_candidates))


def choose_directions(scores: np.ndarray, directions: np.ndarray):
    """Argmax direction per candidate (ties to the lower index) plus R_g."""
    chosen = np.argmax(scores, axis=1)
    rots = np.stack([rotation_from_direction(directions[c]) for c in chosen])
    return chosen, rots


class SetAbstraction:
    """PointNet++-style stages: FPS centers, radius grouping, shared MLP, max."""

    def __init__(
        self,
        widths,
        rng: np.random.Generator,
        ks=(32, 8, 4, 1),
        radii=(0.02, 0.04, 0.08, np.inf),
        c_feat_in: int = 0,
    ):
        if len(widths) != len(ks) or len(ks) != len(radii):
            raise ValueError("stage counts must match")
        self.ks = tuple(ks)
        self.radii = tuple(radii)
        self.widths = tuple(widths)
        self.mlps = []
        c_in = 3 + c_feat_in
        for w in widths:
            self.mlps.append(nn.MLP([c_in, w, w], rng))
            c_in = 3 + w

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def params(self):
        return [p for m in self.mlps for p in m.params()]


def _stage_groups(points: np.ndarray, centers: np.ndarray, radius: float):
    d2 = ((centers[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    cid, pid = np.nonzero(d2 <= radius * radius)
    return cid, pid


def run_set_abstraction(sa: SetAbstraction, points: np.ndarray, feats: Tensor | None = None) -> Tensor:
    """Single-candidate explicit-shape feature (1, out_width); needs >= 1 point."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("set abstraction needs at least one point")
    for mlp, k, radius in zip(sa.mlps, sa.ks, sa.radii):
        centers = pts[farthest_point_sample(pts, min(k, pts.shape[0]))]
        cid, pid = _stage_groups(pts, centers, radius)
        rel = nn.tensor(pts[pid] - centers[cid])
        x = rel if feats is None else nn.concat([rel, nn.gather_rows(feats, pid)], axis=1)
        per_point = mlp(x)
        feats, _ = nn.segment_max(per_point, cid, centers.shape[0])
        pts = centers
    return feats


def run_set_abstraction_batch(sa: SetAbstraction, items) -> list:
    """Shared-parameter SA over many candidates with one MLP pass per stage.

    ``items`` is a list of (points, feats-or-None); returns one (1, out) Tensor
    per item. Matches looping :func:`run_set_abstraction` exactly.
    """
    live = [(np.asarray(p, dtype=np.float64).reshape(-1, 3), f) for p, f in items]
    for mlp, k, radius in zip(sa.mlps, sa.ks, sa.radii):
        rel_rows, seg, gather_parts, center_sets = [], [], [], []
        offset = 0
        for pts, feats in live:
            centers = pts[farthest_point_sample(pts, min(k, pts.shape[0]))]
            cid, pid = _stage_groups(pts, centers, radius)
            rel_rows.append(pts[pid] - centers[cid])
            seg.append(cid + offset)
            gather_parts.append((feats, pid))
            center_sets.append(centers)
            offset += centers.shape[0]
        rel = nn.tensor(np.concatenate(rel_rows))
        if gather_parts[0][0] is not None:
            rows = nn.concat(
                [nn.gather_rows(f, pid) for f, pid in gather_parts], axis=0
            )
            x = nn.concat([rel, rows], axis=1)
        else:
            x = rel
        pooled, _ = nn.segment_max(mlp(x), np.concatenate(seg), offset)
        new_live, at = [], 0
        for centers in center_sets:
            new_live.append((centers, nn.slice_rows(pooled, at, at + centers.shape[0])))
            at += centers.shape[0]
        live = new_live
    return [f for _, f in live]


def implicit_shape_feature(f_o: Tensor, key_k: int, seed: int) -> Tensor:
    """Channelwise max over up to key_k uniformly sampled queried-feature rows."""
    n = f_o.data.shape[0]
    rng = rng_from(seed, 0x15)
    idx = rng.choice(n, size=min(key_k, n), replace=False)
    rows = nn.gather_rows(f_o, idx)
    pooled, _ = nn.segment_max(rows, np.zeros(idx.size, dtype=np.intp), 1)
    return pooled


@dataclass
class LocalShapeInput:
    p_o: np.ndarray  # (N_o, 3) occupied voxel centers, meters
    f_o: Tensor  # (N_o, C) matching queried features

    def __post_init__(self):
        if self.p_o.shape[0] != self.f_o.data.shape[0]:
            raise ValueError("P_o and F_o must align row for row")


def extract_shape_feature(
    shape_input: LocalShapeInput | None,
    sa: SetAbstraction,
    implicit_width: int,
    key_k: int = 32,
    seed: int = 0,
    implicit_mode: str = "maxpool",
    implicit_sa: SetAbstraction | None = None,
):
    """Explicit SA branch concat implicit pooled branch; (feature, empty flag).

    An empty region yields a defined zero feature with the flag set.
    """
    width = sa.out_width + (0 if implicit_mode == "none" else implicit_width)
    if shape_input is None or shape_input.p_o.shape[0] == 0:
        return nn.tensor(np.zeros((1, width))), True
    explicit = run_set_abstraction(sa, shape_input.p_o)
    if implicit_mode == "none":
        return explicit, False
    if implicit_mode == "set_abstraction":
        implicit = run_set_abstraction(implicit_sa, shape_input.p_o, shape_input.f_o)
    else:
        implicit = implicit_shape_feature(shape_input.f_o, key_k, seed)
    return nn.concat([explicit, implicit], axis=1), False


def decode_pose(
    feature: Tensor, head, p_g: np.ndarray, rotation: np.ndarray, gripper_radius: float
):
    """Argmax cell of the 48 scores; widths are sigmoid * 2r.

    Returns (GraspPose, scores Tensor (48,), widths Tensor (48,)).
    """
    out = head(feature)
    scores = nn.sigmoid(nn.reshape(nn.slice_cols(out, 0, N_CELLS), (-1,)))
    widths = nn.mul(nn.sigmoid(nn.reshape(nn.slice_cols(out, N_CELLS, 2 * N_CELLS), (-1,))), 2 * gripper_radius)
    cell = int(np.argmax(scores.data))
    pose = GraspPose(
        p_g=p_g,
        rotation=rotation,
        rot_idx=cell // N_DEPTHS,
        depth_idx=cell % N_DEPTHS,
        width=float(widths.data[cell]),
        score=float(scores.data[cell]),
    )
    return pose, scores, widths


def pose_nms(poses: list, radius: float = 0.03, top: int = 50) -> list:
    """Greedy score-descending suppression by grasp-point distance."""
    if not poses:
        return []
    scores = np.array([p.score for p in poses])
    order = np.argsort(-scores, kind="stable")
    kept: list = []
    for i in order:
        p = poses[i]
        if any(np.linalg.norm(p.p_g - q.p_g) < radius for q in kept):
            continue
        kept.append(p)
        if len(kept) >= top:
            break
    return kept


def gripper_body_samples(pose: GraspPose, spec: GraspRegionSpec, spacing: float | None = None):
    """World-space sample points of the gripper body plus a closing-volume mask.

    Fingers span the full depth interval behind the fingertips; sampling is at
    v/2 by default. Samples inside the closing volume are flagged so occupancy
    there (the grasped object itself) does not count as collision.
    """
    spacing = spacing if spacing is not None else spec.v / 2
    w = pose.width
    finger_len = spec.d_span
    z_tip = pose.depth_m
    zs = np.arange(z_tip - finger_len, z_tip + 1e-9, spacing)
    ys = np.arange(-FINGER_HALF_Y, FINGER_HALF_Y + 1e-9, spacing)
    xs = np.arange(w / 2, w / 2 + FINGER_THICKNESS + 1e-9, spacing)
    fx, fy, fz = np.meshgrid(xs, ys, zs, indexing="ij")
    finger = np.stack([fx.ravel(), fy.ravel(), fz.ravel()], axis=1)
    body = [finger, finger * np.array([-1.0, 1.0, 1.0])]
    pxs = np.arange(-(w / 2 + FINGER_THICKNESS), w / 2 + FINGER_THICKNESS + 1e-9, spacing)
    pzs = np.arange(z_tip - finger_len - PALM_DEPTH, z_tip - finger_len + 1e-9, spacing)
    px, py, pz = np.meshgrid(pxs, ys, pzs, indexing="ij")
    body.append(np.stack([px.ravel(), py.ravel(), pz.ravel()], axis=1))
    local = np.concatenate(body)
    in_closing = (
        (np.abs(local[:, 0]) <= w / 2)
        & (np.abs(local[:, 1]) <= FINGER_HALF_Y)
        & (local[:, 2] >= z_tip - finger_len)
        & (local[:, 2] <= z_tip)
    )
    world = local @ pose.full_rotation().T + pose.p_g
    return world, in_closing


def collision_filter(poses: list, occupied_voxels: np.ndarray, spec: GraspRegionSpec) -> list:
    """Drop poses whose body samples land in predicted-occupied voxels.

    ``occupied_voxels`` are world-grid integer triples; samples inside the
    closing volume are exempt.
    """
    occ = np.asarray(occupied_voxels).reshape(-1, 3)
    if occ.shape[0] == 0:
        return list(poses)
    packed = {(int(a), int(b), int(c)) for a, b, c in occ}
    kept = []
    for pose in poses:
        world, in_closing = gripper_body_samples(pose, spec)
        idx = np.floor(world / spec.v).astype(np.int64)
        collided = False
        for row, inside in zip(idx, in_closing):
            if not inside and (int(row[0]), int(row[1]), int(row[2])) in packed:
                collided = True
                break
        if not collided:
            kept.append(pose)
    return kept


POSE_CSV_HEADER = "px,py,pz,qs,qx,qy,qz,rot_idx,depth_idx,width,score"


def poses_to_csv(poses: list) -> str:
    """UTF-8 CSV with the full rotation (R_g composed with in-plane) as quaternion."""
    lines = [POSE_CSV_HEADER]
    for p in poses:
        q = matrix_to_quat(p.full_rotation())
        vals = [
            f"{p.p_g[0]:.9g}",
            f"{p.p_g[1]:.9g}",
            f"{p.p_g[2]:.9g}",
            f"{q.s:.9g}",
            f"{q.vx:.9g}",
            f"{q.vy:.9g}",
            f"{q.vz:.9g}",
            str(p.rot_idx),
            str(p.depth_idx),
            f"{p.width:.9g}",
            f"{p.score:.9g}",
        ]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def poses_from_csv(text: str) -> list:
    from .geometry import Quaternion, quat_to_matrix

    poses = []
    for line in text.strip().splitlines()[1:]:
        f = line.split(",")
        full = quat_to_matrix(Quaternion(float(f[3]), float(f[4]), float(f[5]), float(f[6])).normalized())
        rot_idx = int(f[7])
        base = full @ rotation_about_z(np.deg2rad(15.0 * rot_idx)).T
        poses.append(
            GraspPose(
                p_g=np.array([float(f[0]), float(f[1]), float(f[2])]),
                rotation=base,
                rot_idx=rot_idx,
                depth_idx=int(f[8]),
                width=float(f[9]),
                score=float(f[10]),
            )
        )
    return poses
