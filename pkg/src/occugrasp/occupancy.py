"""Local occupancy regions around grasp candidates and fused occupancy queries.

Region voxels live on one world-aligned grid (index i maps to center
(i + 0.5) * v) so deduplication, ground-truth alignment and voxel counting
are exact set operations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Tensor
from .scenes import OccupancyGrid
from .triplane import query_global


@dataclass
class GraspRegionSpec:
    r: float = 0.05
    d_min: float = -0.01
    d_max: float = 0.04
    v: float = 0.01
    budget: int = 2_000_000

    def __post_init__(self):
        if self.r <= 0 or self.v <= 0 or self.d_min >= self.d_max:
            raise ValueError("invalid grasp region spec")

    @property
    def d_span(self) -> float:
        return self.d_max - self.d_min


@dataclass
class LocalOccupancyRegion:
    voxels: np.ndarray  # (M, 3) int64 world-grid indices, deduplicated
    centers: np.ndarray  # (M, 3) voxel centers, meters
    owner: np.ndarray  # (M,) nearest candidate index
    spec: GraspRegionSpec

    def __len__(self):
        return self.voxels.shape[0]


def cylinder_mask(points: np.ndarray, p_g: np.ndarray, rotation: np.ndarray, spec: GraspRegionSpec):
    """Exact Eq.-style cylinder membership of world points for one candidate."""
    local = (np.asarray(points) - p_g) @ np.asarray(rotation)
    radial2 = local[:, 0] ** 2 + local[:, 1] ** 2
    return (radial2 <= spec.r**2) & (local[:, 2] >= spec.d_min) & (local[:, 2] <= spec.d_max)


def build_region(candidates, spec: GraspRegionSpec) -> LocalOccupancyRegion:
    """Union of voxelized gripper cylinders over all candidates.

    ``candidates`` is a list of (p_g, R_g) pairs; centers are tested against
    the exact cylinder (no dilation). Ownership goes to the nearest candidate
    grasp point, ties to the lower index.
    """
    if not len(candidates):
        raise ValueError("need at least one candidate")
    v = spec.v
    all_idx = []
    total = 0
    for p_g, rot in candidates:
        p_g = np.asarray(p_g, dtype=np.float64)
        rot = np.asarray(rot, dtype=np.float64)
        axis_lo = p_g + spec.d_min * rot[:, 2]
        axis_hi = p_g + spec.d_max * rot[:, 2]
        lo = np.minimum(axis_lo, axis_hi) - spec.r - v
        hi = np.maximum(axis_lo, axis_hi) + spec.r + v
        i0 = np.floor(lo / v).astype(np.int64)
        i1 = np.floor(hi / v).astype(np.int64)
        gx, gy, gz = np.meshgrid(
            np.arange(i0[0], i1[0] + 1),
            np.arange(i0[1], i1[1] + 1),
            np.arange(i0[2], i1[2] + 1),
            indexing="ij",
        )
        idx = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        centers = (idx + 0.5) * v
        keep = cylinder_mask(centers, p_g, rot, spec)
        sel = idx[keep]
        total += sel.shape[0]
        if total > spec.budget:
            raise ValueError("region budget exceeded")
        all_idx.append(sel)
    voxels = np.unique(np.concatenate(all_idx, axis=0), axis=0)
    if voxels.shape[0] > spec.budget:
        raise ValueError("region budget exceeded")
    centers = (voxels + 0.5) * v
    points = np.stack([np.asarray(p, dtype=np.float64) for p, _ in candidates])
    owner = np.empty(voxels.shape[0], dtype=np.intp)
    for a in range(0, voxels.shape[0], 8192):
        b = min(a + 8192, voxels.shape[0])
        d2 = ((centers[a:b, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        owner[a:b] = np.argmin(d2, axis=1)
    return LocalOccupancyRegion(voxels=voxels, centers=centers, owner=owner, spec=spec)


def nearest_candidates(queries: np.ndarray, candidate_points: np.ndarray) -> np.ndarray:
    """Index of the nearest candidate per query point (ties to lower index)."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    c = np.asarray(candidate_points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(q.shape[0], dtype=np.intp)
    for a in range(0, q.shape[0], 8192):
        b = min(a + 8192, q.shape[0])
        d2 = ((q[a:b, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        out[a:b] = np.argmin(d2, axis=1)
    return out


def local_context(p_q: np.ndarray, candidate_points: np.ndarray, embeddings: Tensor, pe) -> Tensor:
    """f_L = f_p' concat PE(p_q, p', p_q - p') with p' the nearest candidate."""
    q = np.asarray(p_q, dtype=np.float64).reshape(-1, 3)
    nearest = nearest_candidates(q, candidate_points)
    p_prime = np.asarray(candidate_points)[nearest]
    f_prime = nn.gather_rows(embeddings, nearest)
    pe_in = np.concatenate([q, p_prime, q - p_prime], axis=1)
    return nn.concat([f_prime, pe(nn.tensor(pe_in))], axis=1)


@dataclass
class OccupancyPrediction:
    probabilities: np.ndarray  # (M,) in [0, 1]
    occupied: np.ndarray  # (M,) bool, strictly > 0.5

    def __post_init__(self):
        if self.probabilities.size and (
            self.probabilities.min() < 0 or self.probabilities.max() > 1
        ):
            raise ValueError("probabilities must lie in [0, 1]")


def assemble_query_features(
    p_q_norm: np.ndarray,
    stack,
    fusers,
    candidate_points_norm: np.ndarray,
    candidate_embeddings: Tensor,
    pe,
    mode: str = "fused",
) -> Tensor:
    """Queried feature f_pq per point: global tri-plane context, local context
    relative to the nearest candidate, or their concatenation ("fused")."""
    if mode not in ("fused", "global", "local"):
        raise ValueError(f"unknown feature mode {mode!r}")
    parts = []
    if mode in ("fused", "global"):
        parts.append(query_global(stack, fusers, p_q_norm))
    if mode in ("fused", "local"):
        parts.append(local_context(p_q_norm, candidate_points_norm, candidate_embeddings, pe))
    return parts[0] if len(parts) == 1 else nn.concat(parts, axis=1)


def decode_occupancy(features: Tensor, decoder) -> Tensor:
    """Per-row occupancy probability: sigmoid of the decoder MLP output."""
    return nn.sigmoid(nn.reshape(decoder(features), (-1,)))


def query_occupancy(
    region: LocalOccupancyRegion,
    stack,
    fusers,
    pe,
    decoder,
    candidate_points_norm: np.ndarray,
    candidate_embeddings: Tensor,
    affine,
    mode: str = "fused",
) -> OccupancyPrediction:
    """Occupancy probabilities for every region voxel center (inference path)."""
    p_q_norm = affine.apply(region.centers)
    feats = assemble_query_features(
        p_q_norm, stack, fusers, candidate_points_norm, candidate_embeddings, pe, mode
    )
    probs = decode_occupancy(feats, decoder).data
    return OccupancyPrediction(probabilities=probs, occupied=probs > 0.5)


def crop_ground_truth(region: LocalOccupancyRegion, gt: OccupancyGrid) -> np.ndarray:
    """Ground-truth bit per region voxel center (out-of-grid reads 0).

    Tolerances admit the f32 rounding of the OCC1 container while still
    rejecting fractional-voxel misalignment.
    """
    if abs(gt.voxel_size - region.spec.v) > 1e-6 * region.spec.v:
        raise ValueError("misaligned grids: voxel size mismatch")
    shift = gt.origin / region.spec.v
    if np.abs(shift - np.round(shift)).max() > 1e-4:
        raise ValueError("misaligned grids: origin not on the world voxel lattice")
    idx = region.voxels - np.round(shift).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < gt.dims), axis=1)
    out = np.zeros(len(region), dtype=bool)
    out[ok] = gt.occupancy[gt.flat_index(idx[ok])]
    return out


def sample_training_voxels(region: LocalOccupancyRegion, o_gt: np.ndarray, n: int, seed: int):
    """Uniform voxel subsample for mini-batch training (all voxels when M < n)."""
    from .pointcloud import rng_from

    m = len(region)
    if m <= n:
        idx = np.arange(m)
    else:
        idx = np.sort(rng_from(seed, 0x0C).choice(m, size=n, replace=False))
    return idx, region.centers[idx], np.asarray(o_gt)[idx]


def prediction_to_grid(region: LocalOccupancyRegion, occupied: np.ndarray) -> OccupancyGrid:
    """Materialize predicted occupied voxels into their bounding OCC1 grid."""
    if not len(region):
        return OccupancyGrid(np.zeros(3), region.spec.v, [1, 1, 1], np.zeros(1, dtype=bool))
    lo = region.voxels.min(axis=0)
    hi = region.voxels.max(axis=0)
    dims = hi - lo + 1
    grid = OccupancyGrid(lo * region.spec.v, region.spec.v, dims, np.zeros(int(np.prod(dims)), dtype=bool))
    flat = grid.flat_index(region.voxels[occupied] - lo)
    bits = grid.occupancy.copy()
    bits[flat] = True
    grid.occupancy = bits
    return grid
