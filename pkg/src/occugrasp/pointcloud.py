"""Point-cloud containers, deterministic sampling and voxel hashing.

All randomness flows through numpy's PCG64 so identical seeds reproduce
identical outputs on every platform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


def rng_from(seed: int, *path: int) -> np.random.Generator:
    """PCG64 generator keyed by (seed, *path); stateless per-purpose streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=path)))


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64, meters

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class AffineRecord:
    """Per-axis map x -> (x - offset) * scale used to normalize a cloud."""

    offset: np.ndarray  # (3,)
    scale: np.ndarray  # (3,)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.offset) * self.scale

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) / self.scale + self.offset


def sample_fixed(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Exactly ``n`` points: without replacement when possible, else with."""
    if len(cloud) == 0:
        raise ValueError("cannot sample from an empty cloud")
    if n < 1:
        raise ValueError("n must be positive")
    rng = rng_from(seed, 0xF1)
    replace = len(cloud) < n
    idx = rng.choice(len(cloud), size=n, replace=replace)
    return PointCloud(cloud.points[idx])


def farthest_point_sample(items: np.ndarray, k: int) -> np.ndarray:
    """Greedy FPS indices starting from index 0; ties break to the lower index."""
    pts = np.asarray(items, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds point count {n}")
    chosen = np.empty(k, dtype=np.intp)
    chosen[0] = 0
    d = np.linalg.norm(pts - pts[0], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(d))  # argmax returns the first (lowest) max index
        chosen[i] = nxt
        d = np.minimum(d, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


def normalize_unit_cube(cloud: PointCloud) -> tuple:
    """Map per-axis min -> 0 and max -> 1; degenerate axes land at 0.5."""
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    extent = hi - lo
    degenerate = extent <= 0
    scale = np.where(degenerate, 1.0, 1.0 / np.where(degenerate, 1.0, extent))
    offset = np.where(degenerate, lo - 0.5, lo)
    rec = AffineRecord(offset=offset, scale=scale)
    return PointCloud(rec.apply(cloud.points)), rec


def isotropic_workspace_affine(cloud: PointCloud, pad: float) -> AffineRecord:
    """Uniform-scale affine mapping the padded bounding cube into [0, 1]^3.

    Keeps one metric scale on every axis so metric radii stay meaningful in
    normalized coordinates, and leaves ``pad`` meters of in-domain margin for
    query points that reach beyond the observed cloud.
    """
    lo = cloud.points.min(axis=0) - pad
    hi = cloud.points.max(axis=0) + pad
    side = float(np.max(hi - lo))
    if side <= 0:
        side = 1.0
    center = (lo + hi) / 2.0
    offset = center - side / 2.0
    return AffineRecord(offset=offset, scale=np.full(3, 1.0 / side))


def add_gaussian_noise(cloud: PointCloud, sigma: float, fraction: float, seed: int) -> PointCloud:
    """Perturb floor(fraction*N) points with iid per-axis N(0, sigma^2)."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    n = len(cloud)
    m = int(np.floor(fraction * n))
    if sigma == 0 or m == 0:
        return PointCloud(cloud.points.copy())
    rng = rng_from(seed, 0xA0)
    idx = rng.choice(n, size=m, replace=False)
    pts = cloud.points.copy()
    pts[idx] += rng.normal(0.0, sigma, size=(m, 3))
    return PointCloud(pts)


def voxel_keys(points: np.ndarray, size: float, origin=0.0) -> np.ndarray:
    """Integer voxel index triples of each point on a grid anchored at ``origin``."""
    return np.floor((np.asarray(points, dtype=np.float64) - origin) / size).astype(np.int64)


def voxel_downsample(cloud: PointCloud, size: float) -> PointCloud:
    """One centroid per occupied voxel, ordered by first point occurrence."""
    if size <= 0:
        raise ValueError("voxel size must be positive")
    keys = voxel_keys(cloud.points, size)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    groups = rank[inverse]
    sums = np.zeros((order.size, 3))
    counts = np.zeros(order.size)
    np.add.at(sums, groups, cloud.points)
    np.add.at(counts, groups, 1.0)
    return PointCloud(sums / counts[:, None])


def neighborhood_centroids(points: np.ndarray, size: float) -> np.ndarray:
    """Centroid of each point's 3x3x3 block of ``size``-voxels (itself included)."""
    pts = np.asarray(points, dtype=np.float64)
    keys = voxel_keys(pts, size)
    base = keys - keys.min(axis=0) + 1  # margin so neighbor offsets stay valid
    span = base.max(axis=0).astype(np.int64) + 2
    packed = (base[:, 0] * span[1] + base[:, 1]) * span[2] + base[:, 2]
    uniq, inverse = np.unique(packed, return_inverse=True)
    sums = np.zeros((uniq.size, 3))
    counts = np.zeros(uniq.size)
    np.add.at(sums, inverse, pts)
    np.add.at(counts, inverse, 1.0)
    acc = np.zeros((pts.shape[0], 3))
    cnt = np.zeros(pts.shape[0])
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            for dk in (-1, 0, 1):
                nb = packed + (di * span[1] + dj) * span[2] + dk
                pos = np.searchsorted(uniq, nb)
                pos = np.clip(pos, 0, uniq.size - 1)
                ok = uniq[pos] == nb
                acc[ok] += sums[pos[ok]]
                cnt[ok] += counts[pos[ok]]
    return acc / cnt[:, None]


PCB_MAGIC = b"PCB1"


def write_pcb1(path, cloud: PointCloud):
    with open(path, "wb") as f:
        f.write(PCB_MAGIC)
        f.write(struct.pack("<I", len(cloud)))
        f.write(cloud.points.astype("<f4").tobytes())


def read_pcb1(path) -> PointCloud:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != PCB_MAGIC:
        raise ValueError("not a PCB1 file")
    (n,) = struct.unpack_from("<I", raw, 4)
    need = 8 + 12 * n
    if len(raw) < need:
        raise ValueError("truncated PCB1 file")
    pts = np.frombuffer(raw, dtype="<f4", count=3 * n, offset=8).reshape(n, 3)
    return PointCloud(pts.astype(np.float64))
