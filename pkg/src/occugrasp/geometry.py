"""Quaternion algebra, SLERP frame generation and rotation-matrix conversion.

Quaternions are scalar-first (s, vx, vy, vz). The quaternion-to-matrix
formula is implemented exactly as used throughout the pipeline; it is the
transpose of the more common convention, which is irrelevant here as long
as every rotation goes through the same function (it does).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion with scalar part ``s`` and vector part ``(vx, vy, vz)``."""

    s: float
    vx: float
    vy: float
    vz: float

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.vx, self.vy, self.vz], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Quaternion":
        a = np.asarray(a, dtype=np.float64)
        return Quaternion(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def normalized(self) -> "Quaternion":
        return Quaternion.from_array(self.as_array() / self.norm())

    def dot(self, other: "Quaternion") -> float:
        return float(self.as_array() @ other.as_array())


@dataclass(frozen=True)
class FrameSet:
    """K coordinate-frame rotations drawn along a SLERP arc."""

    k: int
    quaternions: tuple
    rotations: tuple

    def __post_init__(self):
        assert len(self.quaternions) == self.k and len(self.rotations) == self.k


def quat_to_matrix(q: Quaternion) -> np.ndarray:
    """Rotation matrix of a unit quaternion (raises if ``q`` is not unit)."""
    if abs(q.norm() - 1.0) > UNIT_TOL:
        raise ValueError(f"quaternion is not unit length (norm={q.norm():.9g})")
    x, y, z, w = q.s, q.vx, q.vy, q.vz
    return np.array(
        [
            [1 - 2 * z * z - 2 * w * w, 2 * y * z + 2 * x * w, 2 * y * w - 2 * x * z],
            [2 * y * z - 2 * x * w, 1 - 2 * y * y - 2 * w * w, 2 * z * w + 2 * x * y],
            [2 * y * w + 2 * x * z, 2 * z * w - 2 * x * y, 1 - 2 * y * y - 2 * z * z],
        ],
        dtype=np.float64,
    )


def matrix_to_quat(r: np.ndarray) -> Quaternion:
    """Inverse of :func:`quat_to_matrix`, scalar part kept nonnegative."""
    # quat_to_matrix(q) is the transpose of the standard convention, so run
    # Shepperd's method on r.T.
    m = np.asarray(r, dtype=np.float64).T
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(m[i, i] - m[j, j] - m[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    q /= np.linalg.norm(q)
    return Quaternion.from_array(q)


def default_endpoints() -> tuple:
    """The canonical SLERP endpoints: identity and (0, 1/sqrt3, 1/sqrt3, 1/sqrt3)."""
    s3 = 1.0 / np.sqrt(3.0)
    return Quaternion(1.0, 0.0, 0.0, 0.0), Quaternion(0.0, s3, s3, s3)


def slerp_frames(q1: Quaternion, q2: Quaternion, k: int) -> FrameSet:
    """K frames q_i = [sin((1-i/K)phi) q1 + sin((i/K)phi) q2] / sin(phi), i=0..K-1."""
    if k < 1:
        raise ValueError("K must be >= 1")
    for q in (q1, q2):
        if abs(q.norm() - 1.0) > UNIT_TOL:
            raise ValueError("slerp endpoints must be unit quaternions")
    dot = q1.dot(q2)
    if abs(dot) >= 1.0 - 1e-9:
        raise ValueError("slerp endpoints collinear")
    phi = float(np.arccos(dot))
    sin_phi = float(np.sin(phi))
    a1, a2 = q1.as_array(), q2.as_array()
    quats = []
    for i in range(k):
        t = i / k
        q = (np.sin((1.0 - t) * phi) * a1 + np.sin(t * phi) * a2) / sin_phi
        q /= np.linalg.norm(q)
        quats.append(Quaternion.from_array(q))
    rots = tuple(quat_to_matrix(q) for q in quats)
    return FrameSet(k=k, quaternions=tuple(quats), rotations=rots)


def rotation_angle(r: np.ndarray) -> float:
    """Angle of a rotation matrix in radians."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_about_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_direction(d: np.ndarray) -> np.ndarray:
    """Rotation whose third column is ``d`` (unit), with a fixed in-plane gauge.

    The x-axis is built from the world axis least aligned with ``d``, so the
    result is deterministic; the in-plane rotation grid absorbs the gauge.
    """
    d = np.asarray(d, dtype=np.float64)
    n = np.linalg.norm(d)
    if not np.isfinite(n) or n == 0:
        raise ValueError("direction must be a nonzero finite vector")
    z = d / n
    e = np.zeros(3)
    e[int(np.argmin(np.abs(z)))] = 1.0
    x = e - (e @ z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def fibonacci_directions(n: int) -> np.ndarray:
    """``n`` unit vectors spread over the full sphere by the golden-angle spiral."""
    if n < 1:
        raise ValueError("need at least one direction")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    theta = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def grasp_direction_set(n: int) -> np.ndarray:
    """Approach directions for tabletop grasping: the straight-down pole plus
    lower-hemisphere Fibonacci points (directions point into the scene)."""
    if n < 1:
        raise ValueError("need at least one direction")
    if n == 1:
        return np.array([[0.0, 0.0, -1.0]])
    full = fibonacci_directions(2 * (n - 1))
    lower = full[full[:, 2] < 0]
    return np.vstack([[0.0, 0.0, -1.0], lower[: n - 1]])


def lattice_directions_26() -> np.ndarray:
    """The 26 normalized nonzero offsets of a 3x3x3 lattice."""
    offs = [
        (i, j, k)
        for i in (-1, 0, 1)
        for j in (-1, 0, 1)
        for k in (-1, 0, 1)
        if (i, j, k) != (0, 0, 0)
    ]
    d = np.array(offs, dtype=np.float64)
    return d / np.linalg.norm(d, axis=1, keepdims=True)
