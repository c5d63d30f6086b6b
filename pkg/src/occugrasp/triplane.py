"""Multi-group tri-plane aggregation and global feature queries.

Each group rotates the normalized cloud, renormalizes to the rotated bounds,
and drops one axis per plane (plane i drops rotated axis i). Plane features
are channelwise max over binned point embeddings plus a softmax-normalized
density channel; queries read the encoded planes by cell-center-registered
bilinear interpolation with border clamping.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import FrameSet
from .nn import MLP, Tensor, segment_max
from .pointcloud import neighborhood_centroids

DOMAIN_EPS = 1e-9
QUERY_MARGIN = 0.05

# plane i drops rotated axis i and maps the remaining axes to (u, v)
_PLANE_AXES = ((1, 2), (0, 2), (0, 1))


@dataclass
class TriplaneCounters:
    """Operation counters backing the cost-model invariants."""

    points_projected: int = 0
    bilinear_reads: int = 0
    fuser_calls: int = 0
    queried_points: int = 0


class PointEncoder:
    """Per-point embedding: MLP over (coords, 5 mm neighborhood centroid)."""

    def __init__(self, c_p: int, rng: np.random.Generator, hidden: int | None = None):
        self.c_p = c_p
        self.mlp = MLP([6, hidden or c_p, c_p], rng)
        self.neighborhood_voxel = 0.005  # normalized units, set by the pipeline

    def params(self):
        return self.mlp.params()


def encode_points(enc: PointEncoder, cloud: np.ndarray, neighborhood_voxel: float | None = None) -> Tensor:
    """Embeddings of a [0,1]^3-normalized cloud, one row per point."""
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if pts.min() < -DOMAIN_EPS or pts.max() > 1.0 + DOMAIN_EPS:
        raise ValueError("encode_points expects a cloud normalized to [0,1]^3")
    voxel = neighborhood_voxel if neighborhood_voxel is not None else enc.neighborhood_voxel
    cen = neighborhood_centroids(pts, voxel)
    return enc.mlp(nn.tensor(np.concatenate([pts, cen], axis=1)))


def _rotated_unit(points: np.ndarray, rotation: np.ndarray, lo=None, hi=None):
    """Rotate and renormalize to the rotated cloud's bounds (degenerate -> 0.5)."""
    rot = points @ np.asarray(rotation).T
    if lo is None:
        lo, hi = rot.min(axis=0), rot.max(axis=0)
    extent = hi - lo
    degenerate = extent <= 0
    scale = np.where(degenerate, 0.0, 1.0 / np.where(degenerate, 1.0, extent))
    unit = (rot - lo) * scale + np.where(degenerate, 0.5, 0.0)
    return unit, lo, hi


def _cells(unit: np.ndarray, plane: int, h: int, w: int):
    ua, va = _PLANE_AXES[plane]
    ix = np.clip(np.floor(unit[:, ua] * w).astype(np.intp), 0, w - 1)
    iy = np.clip(np.floor(unit[:, va] * h).astype(np.intp), 0, h - 1)
    return iy * w + ix


@dataclass
class TriplaneGroup:
    index: int
    rotation: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    raw_flat: list  # 3 Tensors (H*W, C_P), embeddings binned per plane
    density: np.ndarray  # (3, H, W) integer counts
    density_norm: np.ndarray  # (3, H, W) softmax over each plane


@dataclass
class TriplaneStack:
    frames: FrameSet
    h: int
    w: int
    groups: list
    counters: TriplaneCounters = field(default_factory=TriplaneCounters)
    encoded_flat: list | None = None  # 3 Tensors (K*H*W, C_T), group-major rows
    c_t: int = 0

    @property
    def k(self) -> int:
        return self.frames.k


def normalize_density(counts: np.ndarray) -> np.ndarray:
    """Softmax over all H*W cells jointly."""
    flat = counts.astype(np.float64).ravel()
    e = np.exp(flat - flat.max())
    return (e / e.sum()).reshape(counts.shape)


def project_group(
    cloud: np.ndarray,
    embeddings: Tensor,
    frames_or_rotation,
    h: int,
    w: int,
    index: int = 0,
    counters: TriplaneCounters | None = None,
) -> TriplaneGroup:
    """Bin rotated points into three planes: max-pooled embeddings + density."""
    rotation = np.asarray(frames_or_rotation, dtype=np.float64).reshape(3, 3)
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    unit, lo, hi = _rotated_unit(pts, rotation)
    raw, dens, dens_norm = [], [], []
    for i in range(3):
        seg = _cells(unit, i, h, w)
        pooled, _ = segment_max(embeddings, seg, h * w)
        raw.append(pooled)
        counts = np.bincount(seg, minlength=h * w).reshape(h, w)
        dens.append(counts)
        dens_norm.append(normalize_density(counts))
        if counters is not None:
            counters.points_projected += n
    return TriplaneGroup(
        index=index,
        rotation=rotation,
        lo=lo,
        hi=hi,
        raw_flat=raw,
        density=np.stack(dens),
        density_norm=np.stack(dens_norm),
    )


def build_triplanes(
    cloud: np.ndarray, embeddings: Tensor, frames: FrameSet, h: int, w: int
) -> TriplaneStack:
    stack = TriplaneStack(frames=frames, h=h, w=w, groups=[])
    for j, rot in enumerate(frames.rotations):
        stack.groups.append(
            project_group(cloud, embeddings, rot, h, w, index=j, counters=stack.counters)
        )
    return stack


def encode_planes(stack: TriplaneStack, encoders, use_density: bool = True) -> TriplaneStack:
    """Run the three shared plane encoders over all groups (batched per plane)."""
    if len(encoders) != 3:
        raise ValueError("need exactly three plane encoders")
    k, h, w = stack.k, stack.h, stack.w
    encoded = []
    for i in range(3):
        flat = nn.concat([g.raw_flat[i] for g in stack.groups], axis=0)  # (K*H*W, C_P)
        c_p = flat.data.shape[1]
        x = nn.reshape(flat, (k, h, w, c_p))
        if use_density:
            dens = np.stack([g.density_norm[i] for g in stack.groups])[..., None]
            x = nn.concat([x, nn.tensor(dens)], axis=3)
        if x.data.shape[3] != encoders[i].c_in:
            raise ValueError(
                f"plane encoder {i} expects {encoders[i].c_in} channels, got {x.data.shape[3]}"
            )
        out = encoders[i](x)  # (K, H, W, C_T)
        stack.c_t = out.data.shape[3]
        encoded.append(nn.reshape(out, (k * h * w, stack.c_t)))
    stack.encoded_flat = encoded
    return stack


def _bilinear_corners(unit_uv: np.ndarray, h: int, w: int):
    """Cell-center-registered corner indices and weights with border clamping."""
    gx = unit_uv[:, 0] * w - 0.5
    gy = unit_uv[:, 1] * h - 0.5
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    tx = gx - x0
    ty = gy - y0
    x0c = np.clip(x0, 0, w - 1).astype(np.intp)
    x1c = np.clip(x0 + 1, 0, w - 1).astype(np.intp)
    y0c = np.clip(y0, 0, h - 1).astype(np.intp)
    y1c = np.clip(y0 + 1, 0, h - 1).astype(np.intp)
    idx = [y0c * w + x0c, y0c * w + x1c, y1c * w + x0c, y1c * w + x1c]
    wts = [(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty]
    return idx, wts


def query_global(stack: TriplaneStack, fusers, p_q: np.ndarray) -> Tensor:
    """Fused global context f_G for normalized query points (M, 3).

    fusers = (e1, e2): e1 fuses the three per-plane reads of one group,
    e2 fuses the K group features.
    """
    if stack.encoded_flat is None:
        raise RuntimeError("encode_planes must run before queries")
    pts = np.asarray(p_q, dtype=np.float64).reshape(-1, 3)
    if pts.size and (pts.min() < -QUERY_MARGIN or pts.max() > 1.0 + QUERY_MARGIN):
        raise ValueError("query point outside the [-0.05, 1.05]^3 normalization domain")
    m = pts.shape[0]
    k, h, w = stack.k, stack.h, stack.w
    e1, e2 = fusers

    # m-major, j-minor row layout so reshape concatenates groups per query
    unit_all = np.empty((m, k, 3))
    for j, g in enumerate(stack.groups):
        unit_all[:, j], _, _ = _rotated_unit(pts, g.rotation, g.lo, g.hi)
    unit_flat = unit_all.reshape(m * k, 3)
    base = np.tile(np.arange(k, dtype=np.intp) * (h * w), m) + 0  # group row offset

    per_plane = []
    for i in range(3):
        ua, va = _PLANE_AXES[i]
        idx, wts = _bilinear_corners(unit_flat[:, [ua, va]], h, w)
        parts = [
            (nn.gather_rows(stack.encoded_flat[i], base + ii), ww) for ii, ww in zip(idx, wts)
        ]
        per_plane.append(nn.weighted_row_sum(parts))
    fused = nn.concat(per_plane, axis=1)  # (M*K, 3*C_T)
    f_tj = e1(fused)
    f_groups = nn.reshape(f_tj, (m, k * f_tj.data.shape[1]))
    f_g = e2(f_groups)
    stack.counters.bilinear_reads += m * 3 * k
    stack.counters.fuser_calls += 2 * m
    stack.counters.queried_points += m
    return f_g


TPL_MAGIC = b"TPL1"


def write_tpl1(path, stack: TriplaneStack):
    """Encoded plane dump: magic, K, H, W, C, then (j, i, c, y, x) f32 planes."""
    if stack.encoded_flat is None:
        raise RuntimeError("no encoded planes to dump")
    k, h, w, c = stack.k, stack.h, stack.w, stack.c_t
    with open(path, "wb") as f:
        f.write(TPL_MAGIC)
        f.write(struct.pack("<IIII", k, h, w, c))
        for j in range(k):
            for i in range(3):
                rows = stack.encoded_flat[i].data[j * h * w : (j + 1) * h * w]
                f.write(rows.reshape(h, w, c).transpose(2, 0, 1).astype("<f4").tobytes())


def read_tpl1(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != TPL_MAGIC:
        raise ValueError("not a TPL1 file")
    k, h, w, c = struct.unpack_from("<IIII", raw, 4)
    flat = np.frombuffer(raw, dtype="<f4", offset=20)
    return flat.reshape(k, 3, c, h, w).astype(np.float64)
