"""Single-view depth rendering of SDF scenes and pinhole unprojection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud, farthest_point_sample
from .scenes import SdfScene, scene_sdf

SURFACE_EPS = 1e-5
MAX_STEPS = 256


@dataclass
class Camera:
    rotation: np.ndarray  # (3,3) camera-to-world
    translation: np.ndarray  # (3,) camera center in world
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("resolution must be at least 8x8")


def look_at_camera(eye, target, width=160, height=120, f=140.0) -> Camera:
    """Camera at ``eye`` with +z toward ``target`` (y chosen world-down-ish)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    if abs(z @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=1)
    return Camera(rot, eye, f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def render_depth(scene: SdfScene, cam: Camera) -> np.ndarray:
    """Sphere-traced z-depth image in meters; 0 encodes a miss.

    Rays march with plain steps (relaxation 1) until |sdf| < 1e-5 m, the step
    cap, or exit from the scene bounds.
    """
    u = np.arange(cam.width, dtype=np.float64)
    v = np.arange(cam.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack(
        [(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1
    )
    dirs = dirs_cam.reshape(-1, 3) @ cam.rotation.T
    norms = np.linalg.norm(dirs, axis=1)
    origin = cam.translation
    lo = scene.bounds[0] - 0.05
    hi = scene.bounds[1] + 0.05

    # clip rays to the padded bounds box (slab method, z-depth parameter t)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origin) / dirs
        t1 = (hi - origin) / dirs
    t0 = np.where(np.isfinite(t0), t0, -np.inf)
    t1 = np.where(np.isfinite(t1), t1, np.inf)
    t_near = np.minimum(t0, t1).max(axis=1)
    t_far = np.maximum(t0, t1).min(axis=1)

    n = dirs.shape[0]
    t = np.maximum(t_near, 0.0)
    depth = np.zeros(n)
    active = t_near <= t_far
    for _ in range(MAX_STEPS):
        if not active.any():
            break
        pts = origin + t[active, None] * dirs[active]
        s = scene_sdf(scene, pts)
        hit = np.abs(s) < SURFACE_EPS
        idx = np.flatnonzero(active)
        depth[idx[hit]] = t[idx[hit]]
        t[idx] += s / norms[idx]
        alive = ~hit & (t[idx] <= t_far[idx])
        active[idx[~alive]] = False
    return depth.reshape(cam.height, cam.width)


def depth_to_pointcloud(depth: np.ndarray, cam: Camera) -> PointCloud:
    """Camera-frame points of every nonzero pixel via pinhole unprojection."""
    vv, uu = np.nonzero(depth)
    d = depth[vv, uu]
    x = (uu - cam.cx) / cam.fx * d
    y = (vv - cam.cy) / cam.fy * d
    return PointCloud(np.stack([x, y, d], axis=1)) if d.size else PointCloud(np.zeros((0, 3)))


def project(point_cam: np.ndarray, cam: Camera) -> tuple:
    """Inverse of unprojection: camera-frame point -> (u, v, depth)."""
    x, y, z = np.asarray(point_cam, dtype=np.float64)
    return (x / z * cam.fx + cam.cx, y / z * cam.fy + cam.cy, z)


def merge_views(clouds, poses) -> PointCloud:
    """Concatenate camera-frame clouds after rigid transform to world."""
    if len(clouds) != len(poses):
        raise ValueError("clouds and poses must have equal length")
    parts = []
    for cloud, (rot, t) in zip(clouds, poses):
        parts.append(cloud.points @ np.asarray(rot).T + np.asarray(t))
    pts = np.concatenate(parts, axis=0) if parts else np.zeros((0, 3))
    return PointCloud(pts)


def viewpoint_ring(n: int = 256, radius: float = 0.55, z: float = 0.45, phase: float = 0.0):
    """Candidate camera centers on a tilted ring around the scene."""
    ang = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([radius * np.cos(ang), radius * np.sin(ang), np.full(n, z)], axis=1)


def select_views(n_views: int, seed: int, n_candidates: int = 256):
    """FPS-selected camera centers; view 0 is the FPS seed so sets nest by count."""
    from .pointcloud import rng_from

    phase = rng_from(seed, 0xCA).uniform(0, 2 * np.pi)
    ring = viewpoint_ring(n_candidates, phase=phase)
    idx = farthest_point_sample(ring, n_views)
    return ring[idx]


def render_scene_cloud(scene: SdfScene, n_views: int, seed: int) -> PointCloud:
    """World-frame point cloud merged from sphere-traced depth views."""
    centers = select_views(n_views, seed)
    clouds, poses = [], []
    for c in centers:
        cam = look_at_camera(c, [0.0, 0.0, 0.05])
        depth = render_depth(scene, cam)
        clouds.append(depth_to_pointcloud(depth, cam))
        poses.append((cam.rotation, cam.translation))
    return merge_views(clouds, poses)
