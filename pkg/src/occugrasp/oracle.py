"""Analytic antipodal grasp oracle over exact scene SDFs.

A grasp succeeds when both finger marches along the closing axis find
contacts within the opening width, both contact normals lie inside the
friction cone of the closing axis (opposing signs), and the swept gripper
body stays collision-free. The batch path returns the minimal friction
coefficient mu* per pose, so success at any mu is a threshold test and the
friction-monotonicity invariant holds by construction.
"""

from __future__ import annotations

import numpy as np

from .geometry import lattice_directions_26, rotation_about_z, rotation_from_direction
from .scenes import SdfScene, scene_sdf

CONTACT_EPS = 1e-5
MARCH_STEPS = 96
GRAD_H = 1e-4

# gripper body model (meters); the paper gives no body dimensions
FINGER_THICKNESS = 0.01
FINGER_HALF_Y = 0.01
PALM_DEPTH = 0.02
SWEEP_CLEARANCE = 0.0015


def _march(scene: SdfScene, origins: np.ndarray, dirs: np.ndarray, limits: np.ndarray):
    """Sphere-trace rays up to per-ray travel limits; returns (hit, travel)."""
    n = origins.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    s0 = scene_sdf(scene, origins)
    active = s0 > 0.0  # a finger starting inside material never makes contact
    for _ in range(MARCH_STEPS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        s = scene_sdf(scene, origins[idx] + t[idx, None] * dirs[idx])
        found = s < CONTACT_EPS
        hit[idx[found]] = True
        t[idx] += np.maximum(s, 0.0)
        dead = found | (t[idx] > limits[idx])
        active[idx[dead]] = False
    return hit, t


def _grid3(nx: int, ny: int, nz: int) -> np.ndarray:
    """Unit-cube lattice of fixed sample counts, flattened to (nx*ny*nz, 3)."""
    gx, gy, gz = np.meshgrid(
        np.linspace(0.0, 1.0, nx), np.linspace(0.0, 1.0, ny), np.linspace(0.0, 1.0, nz), indexing="ij"
    )
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


_FINGER_GRID = _grid3(6, 3, 6)
_PALM_GRID = _grid3(11, 3, 3)


def _body_free_batch(
    scene: SdfScene,
    p: np.ndarray,
    rot: np.ndarray,
    depths: np.ndarray,
    widths: np.ndarray,
    w_close: np.ndarray,
    d_span: float,
) -> np.ndarray:
    """Vectorized swept-body collision test; True where all samples have sdf > 0.

    The swept finger slab spans from just outside the closing width out to the
    opening width plus finger thickness; the palm slab sits behind the fingers.
    """
    n = p.shape[0]
    if n == 0:
        return np.zeros(0, dtype=bool)
    x_in = w_close / 2 + SWEEP_CLEARANCE
    x_out = np.maximum(widths / 2 + FINGER_THICKNESS, x_in + 1e-4)
    z_tip = depths
    z_back = depths - d_span
    fg = _FINGER_GRID  # (F, 3) in [0,1]^3
    fx = x_in[:, None] + fg[None, :, 0] * (x_out - x_in)[:, None]
    fy = -FINGER_HALF_Y + fg[None, :, 1] * 2 * FINGER_HALF_Y + np.zeros((n, 1))
    fz = z_back[:, None] + fg[None, :, 2] * (z_tip - z_back)[:, None]
    finger = np.stack([fx, fy, fz], axis=2)  # (n, F, 3)
    fingers = np.concatenate([finger, finger * np.array([-1.0, 1.0, 1.0])], axis=1)
    pg = _PALM_GRID
    px = -x_out[:, None] + pg[None, :, 0] * 2 * x_out[:, None]
    py = -FINGER_HALF_Y + pg[None, :, 1] * 2 * FINGER_HALF_Y + np.zeros((n, 1))
    pz = (z_back - PALM_DEPTH)[:, None] + pg[None, :, 2] * PALM_DEPTH
    palm = np.stack([px, py, pz], axis=2)
    body = np.concatenate([fingers, palm], axis=1)  # (n, B, 3)
    world = np.einsum("nij,nbj->nbi", rot, body) + p[:, None, :]
    free = np.ones(n, dtype=bool)
    step = max(1, int(2e6 // body.shape[1]))
    for a in range(0, n, step):
        b = min(a + step, n)
        s = scene_sdf(scene, world[a:b].reshape(-1, 3)).reshape(b - a, -1)
        free[a:b] = np.all(s > 0.0, axis=1)
    return free


def oracle_batch(
    scene: SdfScene,
    grasp_points: np.ndarray,
    rotations: np.ndarray,
    depths: np.ndarray,
    widths: np.ndarray,
    d_span: float = 0.05,
):
    """Vectorized oracle over P poses.

    Returns (mu_star, closing_width, feasible): mu_star is inf where no valid
    antipodal contact pair exists, closing_width is nan there, and feasible
    already includes the swept-body collision check.
    """
    p = np.asarray(grasp_points, dtype=np.float64).reshape(-1, 3)
    rot = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    widths = np.asarray(widths, dtype=np.float64).reshape(-1)
    n = p.shape[0]
    x_hat = rot[:, :, 0]
    z_hat = rot[:, :, 2]
    centers = p + depths[:, None] * z_hat

    origins = np.concatenate([centers + widths[:, None] / 2 * x_hat, centers - widths[:, None] / 2 * x_hat])
    dirs = np.concatenate([-x_hat, x_hat])
    limits = np.concatenate([widths, widths])
    hit, travel = _march(scene, origins, dirs, limits)

    hit_a, hit_b = hit[:n], hit[n:]
    t_a, t_b = travel[:n], travel[n:]
    w_close = widths - t_a - t_b
    contacts_ok = hit_a & hit_b & (w_close > 0.0)

    mu_star = np.full(n, np.inf)
    closing = np.full(n, np.nan)
    feasible = np.zeros(n, dtype=bool)
    if contacts_ok.any():
        sel = np.flatnonzero(contacts_ok)
        ca = origins[sel] + t_a[sel, None] * dirs[sel]
        cb = origins[n + sel] + t_b[sel, None] * dirs[n + sel]
        na = scene.sdf_gradient(ca, h=GRAD_H)
        nb = scene.sdf_gradient(cb, h=GRAD_H)
        na /= np.maximum(np.linalg.norm(na, axis=1, keepdims=True), 1e-12)
        nb /= np.maximum(np.linalg.norm(nb, axis=1, keepdims=True), 1e-12)
        cos_a = np.einsum("ij,ij->i", na, x_hat[sel])
        cos_b = np.einsum("ij,ij->i", nb, -x_hat[sel])
        good = (cos_a > 1e-6) & (cos_b > 1e-6)
        cos_min = np.minimum(cos_a, cos_b)
        mu = np.where(good, np.sqrt(np.maximum(1 - cos_min**2, 0.0)) / np.maximum(cos_min, 1e-12), np.inf)
        mu_star[sel] = mu
        closing[sel] = w_close[sel]
        # swept-body collision check only where the contact pair is valid
        chk = sel[good]
        feasible[chk] = _body_free_batch(
            scene, p[chk], rot[chk], depths[chk], widths[chk], w_close[chk], d_span
        )
    mu_star[~feasible] = np.inf
    return mu_star, closing, feasible


def grasp_oracle(scene: SdfScene, pose, mu: float, d_span: float = 0.05) -> bool:
    """Single-pose success test (see :func:`oracle_batch` for the rules)."""
    if mu <= 0:
        raise ValueError("friction coefficient must be positive")
    rot = pose.full_rotation() if hasattr(pose, "full_rotation") else np.asarray(pose[1])
    p_g = np.asarray(pose.p_g if hasattr(pose, "p_g") else pose[0], dtype=np.float64)
    depth = float(pose.depth_m if hasattr(pose, "depth_m") else pose[2])
    width = float(pose.width if hasattr(pose, "width") else pose[3])
    if not (
        np.all(np.isfinite(p_g)) and np.all(np.isfinite(rot)) and np.isfinite(depth) and np.isfinite(width)
    ):
        raise ValueError("non-finite grasp pose")
    mu_star, _, feasible = oracle_batch(scene, p_g[None], rot[None], [depth], [width], d_span=d_span)
    return bool(feasible[0] and mu_star[0] <= mu)


# ---------------------------------------------------------------------------
# oracle-derived training labels


def affordance_labels(
    scene: SdfScene,
    points: np.ndarray,
    mu: float = 0.8,
    width: float = 0.1,
    depth: float = 0.02,
    d_span: float = 0.05,
) -> np.ndarray:
    """Graspable iff the oracle succeeds for any of the 26 coarse directions.

    Four in-plane rotations are tried per direction so face-aligned objects
    under arbitrary yaw are not missed.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    out = np.zeros(n, dtype=bool)
    for d in lattice_directions_26():
        base = rotation_from_direction(d)
        for ang in (0.0, 45.0, 90.0, 135.0):
            todo = ~out
            if not todo.any():
                return out
            rot = base @ rotation_about_z(np.deg2rad(ang))
            idx = np.flatnonzero(todo)
            mu_star, _, feasible = oracle_batch(
                scene,
                pts[idx],
                np.broadcast_to(rot, (idx.size, 3, 3)),
                np.full(idx.size, depth),
                np.full(idx.size, width),
                d_span=d_span,
            )
            out[idx] |= feasible & (mu_star <= mu)
    return out


def pose_grid_rotations(base: np.ndarray, n_rot: int = 12, n_depth: int = 4):
    """Full rotations and depths of the (in-plane rotation x depth) grid.

    Flat cell order is rotation-major: cell = rot_idx * n_depth + depth_idx,
    rotation angle rot_idx*15 deg, depth (depth_idx+1) cm.
    """
    rots = np.empty((n_rot * n_depth, 3, 3))
    depths = np.empty(n_rot * n_depth)
    for ri in range(n_rot):
        r = base @ rotation_about_z(np.deg2rad(15.0 * ri))
        for di in range(n_depth):
            rots[ri * n_depth + di] = r
            depths[ri * n_depth + di] = 0.01 * (di + 1)
    return rots, depths


def pool_label_tables(
    scene: SdfScene,
    pool_points: np.ndarray,
    directions: np.ndarray,
    mu: float = 0.8,
    max_width: float = 0.1,
    d_span: float = 0.05,
    chunk: int = 8192,
):
    """Oracle success and closing-width tables over (pool, direction, 48 cells).

    Success is evaluated at the maximal opening width; the stored width is the
    contact separation plus a 1 cm closing margin, capped at ``max_width``.
    """
    pool = np.asarray(pool_points, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n_p, n_v = pool.shape[0], dirs.shape[0]
    cells = 48
    all_rot = np.empty((n_v * cells, 3, 3))
    all_dep = np.empty(n_v * cells)
    for vi, d in enumerate(dirs):
        r, dep = pose_grid_rotations(rotation_from_direction(d))
        all_rot[vi * cells : (vi + 1) * cells] = r
        all_dep[vi * cells : (vi + 1) * cells] = dep

    success = np.zeros((n_p, n_v * cells), dtype=np.uint8)
    widths = np.zeros((n_p, n_v * cells), dtype=np.float32)
    flat_p = np.repeat(pool, n_v * cells, axis=0)
    flat_r = np.tile(all_rot, (n_p, 1, 1))
    flat_d = np.tile(all_dep, n_p)
    total = flat_p.shape[0]
    mu_star = np.empty(total)
    closing = np.empty(total)
    feas = np.empty(total, dtype=bool)
    for a in range(0, total, chunk):
        b = min(a + chunk, total)
        ms, cl, fe = oracle_batch(
            scene, flat_p[a:b], flat_r[a:b], flat_d[a:b], np.full(b - a, max_width), d_span=d_span
        )
        mu_star[a:b], closing[a:b], feas[a:b] = ms, cl, fe
    ok = feas & (mu_star <= mu)
    success.reshape(-1)[:] = ok.astype(np.uint8)
    w = np.where(np.isfinite(closing), np.minimum(closing + 0.01, max_width), 0.0)
    widths.reshape(-1)[:] = np.where(ok, w, 0.0).astype(np.float32)
    return success.reshape(n_p, n_v, cells), widths.reshape(n_p, n_v, cells)
