"""Synthetic tabletop scenes built from exact signed-distance primitives.

The scene SDF is the min over object SDFs and the table half-space; the
table counts as solid matter, matching the occupancy labels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import Quaternion, quat_to_matrix, rotation_about_z
from .pointcloud import rng_from

KINDS = ("sphere", "box", "cylinder", "capsule")


@dataclass
class SdfPrimitive:
    kind: str
    rotation: np.ndarray  # (3,3), local->world
    translation: np.ndarray  # (3,)
    params: np.ndarray  # sphere: r | box: hx hy hz | cylinder: r h | capsule: r h

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        if np.any(self.params <= 0):
            raise ValueError("shape parameters must be strictly positive")

    def bounding_radius(self) -> float:
        p = self.params
        if self.kind == "sphere":
            return float(p[0])
        if self.kind == "box":
            return float(np.linalg.norm(p))
        if self.kind == "cylinder":
            return float(np.hypot(p[0], p[1] / 2))
        return float(p[0] + p[1] / 2)  # capsule

    def sdf(self, x: np.ndarray) -> np.ndarray:
        """Exact signed distance at world points (..., 3)."""
        x = np.asarray(x, dtype=np.float64)
        local = (x - self.translation) @ self.rotation  # R^T (x - t), row form
        p = self.params
        if self.kind == "sphere":
            return np.linalg.norm(local, axis=-1) - p[0]
        if self.kind == "box":
            q = np.abs(local) - p[:3]
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        if self.kind == "cylinder":
            dxy = np.linalg.norm(local[..., :2], axis=-1) - p[0]
            dz = np.abs(local[..., 2]) - p[1] / 2
            outside = np.sqrt(np.maximum(dxy, 0.0) ** 2 + np.maximum(dz, 0.0) ** 2)
            inside = np.minimum(np.maximum(dxy, dz), 0.0)
            return outside + inside
        # capsule: segment of half-length h/2 along local z, radius r
        h2 = p[1] / 2
        q = local.copy()
        q[..., 2] -= np.clip(q[..., 2], -h2, h2)
        return np.linalg.norm(q, axis=-1) - p[0]


DEFAULT_BOUNDS = np.array([[-0.32, -0.32, -0.06], [0.32, 0.32, 0.42]])


@dataclass
class SdfScene:
    objects: list
    table_height: float = 0.0
    bounds: np.ndarray = field(default_factory=lambda: DEFAULT_BOUNDS.copy())
    rng_seed: int = 0

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return scene_sdf(self, x)

    def sdf_gradient(self, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
        """Central-difference gradient of the scene SDF at points (..., 3)."""
        x = np.asarray(x, dtype=np.float64)
        g = np.empty_like(x)
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            g[..., a] = (scene_sdf(self, x + e) - scene_sdf(self, x - e)) / (2 * h)
        return g


def scene_sdf(scene: SdfScene, x: np.ndarray) -> np.ndarray:
    """Min-combined signed distance of objects and the table half-space."""
    x = np.asarray(x, dtype=np.float64)
    d = x[..., 2] - scene.table_height
    for obj in scene.objects:
        d = np.minimum(d, obj.sdf(x))
    return d


@dataclass
class OccupancyGrid:
    origin: np.ndarray  # (3,)
    voxel_size: float
    dims: np.ndarray  # (3,) ints
    occupancy: np.ndarray  # flat bool, x-fastest

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = np.asarray(self.dims, dtype=np.int64).reshape(3)
        self.occupancy = np.asarray(self.occupancy, dtype=bool).reshape(-1)
        if self.occupancy.size != int(np.prod(self.dims)):
            raise ValueError("occupancy bit count does not match dims")

    def flat_index(self, idx: np.ndarray) -> np.ndarray:
        """x-fastest flat index of integer voxel triples."""
        idx = np.asarray(idx, dtype=np.int64)
        return idx[..., 0] + self.dims[0] * (idx[..., 1] + self.dims[1] * idx[..., 2])

    def centers(self) -> np.ndarray:
        ii = np.arange(int(np.prod(self.dims)))
        x = ii % self.dims[0]
        y = (ii // self.dims[0]) % self.dims[1]
        z = ii // (self.dims[0] * self.dims[1])
        return self.origin + (np.stack([x, y, z], axis=1) + 0.5) * self.voxel_size

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """Occupancy bit at world points; outside the grid reads as 0."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        idx = np.floor((pts - self.origin) / self.voxel_size).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < self.dims), axis=1)
        out = np.zeros(len(pts), dtype=bool)
        out[ok] = self.occupancy[self.flat_index(idx[ok])]
        return out


def ground_truth_occupancy(scene: SdfScene, voxel_size: float) -> OccupancyGrid:
    """Voxel occupied iff the scene SDF at its center is <= 0."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    lo, hi = scene.bounds
    dims = np.maximum(1, np.round((hi - lo) / voxel_size)).astype(np.int64)
    if int(np.prod(dims)) > 10**8:
        raise ValueError("grid too large")
    grid = OccupancyGrid(lo, voxel_size, dims, np.zeros(int(np.prod(dims)), dtype=bool))
    occ = scene_sdf(scene, grid.centers()) <= 0.0
    grid.occupancy = occ
    return grid


OCC_MAGIC = b"OCC1"


def write_occ1(path, grid: OccupancyGrid):
    with open(path, "wb") as f:
        f.write(OCC_MAGIC)
        f.write(np.asarray(grid.origin, dtype="<f4").tobytes())
        f.write(struct.pack("<f", grid.voxel_size))
        f.write(np.asarray(grid.dims, dtype="<u4").tobytes())
        f.write(np.packbits(grid.occupancy, bitorder="little").tobytes())


def read_occ1(path) -> OccupancyGrid:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != OCC_MAGIC:
        raise ValueError("not an OCC1 file")
    origin = np.frombuffer(raw, dtype="<f4", count=3, offset=4).astype(np.float64)
    (voxel,) = struct.unpack_from("<f", raw, 16)
    dims = np.frombuffer(raw, dtype="<u4", count=3, offset=20).astype(np.int64)
    n = int(np.prod(dims))
    bits = np.unpackbits(
        np.frombuffer(raw, dtype=np.uint8, offset=32), bitorder="little"
    )[:n].astype(bool)
    return OccupancyGrid(origin, float(voxel), dims, bits)


# ---------------------------------------------------------------------------
# scene text format and random generation


def scene_to_text(scene: SdfScene) -> str:
    from .geometry import matrix_to_quat

    lines = [
        f"# table_height {scene.table_height:.9g}",
        "# bounds "
        + " ".join(f"{v:.9g}" for v in np.concatenate([scene.bounds[0], scene.bounds[1]])),
        f"# seed {scene.rng_seed}",
    ]
    for obj in scene.objects:
        q = matrix_to_quat(obj.rotation)
        fields = (
            [obj.kind]
            + [f"{v:.9g}" for v in obj.translation]
            + [f"{v:.9g}" for v in (q.vx, q.vy, q.vz, q.s)]
            + [f"{v:.9g}" for v in obj.params]
        )
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> SdfScene:
    table_height, bounds, seed = 0.0, DEFAULT_BOUNDS.copy(), 0
    objects = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "table_height":
                table_height = float(parts[1])
            elif parts and parts[0] == "bounds":
                vals = [float(v) for v in parts[1:7]]
                bounds = np.array(vals).reshape(2, 3)
            elif parts and parts[0] == "seed":
                seed = int(parts[1])
            continue
        parts = line.split()
        kind = parts[0]
        vals = [float(v) for v in parts[1:]]
        t = np.array(vals[:3])
        qx, qy, qz, qw = vals[3:7]
        rot = quat_to_matrix(Quaternion(qw, qx, qy, qz).normalized())
        objects.append(SdfPrimitive(kind, rot, t, np.array(vals[7:])))
    return SdfScene(objects, table_height=table_height, bounds=bounds, rng_seed=seed)


def write_scene(path, scene: SdfScene):
    with open(path, "w", encoding="utf-8") as f:
        f.write(scene_to_text(scene))


def read_scene(path) -> SdfScene:
    with open(path, "r", encoding="utf-8") as f:
        return scene_from_text(f.read())


def _random_primitive(rng: np.random.Generator, table: float) -> SdfPrimitive:
    kind = KINDS[rng.integers(len(KINDS))]
    yaw = rotation_about_z(rng.uniform(0, 2 * np.pi))
    if kind == "sphere":
        r = rng.uniform(0.018, 0.035)
        return SdfPrimitive(kind, np.eye(3), [0, 0, table + r], [r])
    if kind == "box":
        h = rng.uniform(0.012, 0.032, size=3)
        return SdfPrimitive(kind, yaw, [0, 0, table + h[2]], h)
    if kind == "cylinder":
        r = rng.uniform(0.014, 0.030)
        h = rng.uniform(0.035, 0.10)
        return SdfPrimitive(kind, np.eye(3), [0, 0, table + h / 2], [r, h])
    r = rng.uniform(0.013, 0.024)
    h = rng.uniform(0.03, 0.07)
    return SdfPrimitive(kind, yaw, [0, 0, table + h / 2 + r], [r, h])


def random_scene(seed: int, min_objects: int = 3, max_objects: int = 8) -> SdfScene:
    """Cluttered tabletop: 3-8 primitives rested on the table.

    Rejection sampling keeps >= 5 mm surface clearance between objects,
    estimated conservatively through bounding spheres.
    """
    rng = rng_from(seed, 0x5C)
    n_target = int(rng.integers(min_objects, max_objects + 1))
    table = 0.0
    placed: list = []
    tries = 0
    area = 0.17
    while len(placed) < n_target and tries < 200:
        tries += 1
        prim = _random_primitive(rng, table)
        xy = rng.uniform(-area, area, size=2)
        prim.translation = prim.translation + np.array([xy[0], xy[1], 0.0])
        rad = prim.bounding_radius()
        ok = True
        for other in placed:
            gap = np.linalg.norm(prim.translation - other.translation) - rad - other.bounding_radius()
            if gap < 0.005:
                ok = False
                break
        if ok:
            placed.append(prim)
    if len(placed) < min_objects:
        raise RuntimeError(f"scene generation failed for seed {seed}")
    return SdfScene(placed, table_height=table, rng_seed=seed)
