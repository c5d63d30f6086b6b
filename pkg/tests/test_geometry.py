import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occugrasp.geometry import (
    FrameSet,
    Quaternion,
    default_endpoints,
    fibonacci_directions,
    lattice_directions_26,
    matrix_to_quat,
    quat_to_matrix,
    rotation_about_z,
    rotation_angle,
    rotation_from_direction,
    slerp_frames,
)


def random_unit_quat(rng):
    q = rng.normal(size=4)
    return Quaternion.from_array(q / np.linalg.norm(q))


unit_quats = st.builds(
    lambda seed: random_unit_quat(np.random.default_rng(seed)), st.integers(0, 2**32 - 1)
)


class TestQuatToMatrix:
    def test_identity(self):
        np.testing.assert_allclose(quat_to_matrix(Quaternion(1, 0, 0, 0)), np.eye(3))

    def test_x_half_turn(self):
        # substitute (s,vx,vy,vz)=(0,1,0,0) into the matrix entries
        np.testing.assert_allclose(
            quat_to_matrix(Quaternion(0, 1, 0, 0)), np.diag([1.0, -1.0, -1.0]), atol=1e-15
        )

    def test_random_orthogonal_det_one(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            r = quat_to_matrix(random_unit_quat(rng))
            np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(r) - 1.0) < 1e-9

    def test_non_unit_rejected(self):
        with pytest.raises(ValueError):
            quat_to_matrix(Quaternion(1.0, 1.0, 0, 0))

    @given(unit_quats)
    @settings(max_examples=50, deadline=None)
    def test_double_cover(self, q):
        neg = Quaternion(-q.s, -q.vx, -q.vy, -q.vz)
        np.testing.assert_allclose(quat_to_matrix(q), quat_to_matrix(neg), atol=1e-12)

    @given(unit_quats, st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_norm_preserving(self, q, seed):
        v = np.random.default_rng(seed).normal(size=3)
        rv = quat_to_matrix(q) @ v
        assert abs(np.linalg.norm(rv) - np.linalg.norm(v)) < 1e-9

    @given(unit_quats)
    @settings(max_examples=50, deadline=None)
    def test_matrix_round_trip(self, q):
        r = quat_to_matrix(q)
        q2 = matrix_to_quat(r)
        np.testing.assert_allclose(quat_to_matrix(q2), r, atol=1e-9)


class TestSlerp:
    def test_k1_is_q1(self):
        q1, q2 = default_endpoints()
        fs = slerp_frames(q1, q2, 1)
        np.testing.assert_allclose(fs.quaternions[0].as_array(), q1.as_array(), atol=1e-12)

    def test_k2_midpoint(self):
        # evaluate the interpolation formula directly with phi = pi/2
        q1, q2 = default_endpoints()
        fs = slerp_frames(q1, q2, 2)
        expected = (q1.as_array() + q2.as_array()) / np.sqrt(2.0)
        np.testing.assert_allclose(fs.quaternions[1].as_array(), expected, atol=1e-9)
        np.testing.assert_allclose(
            fs.quaternions[1].as_array(),
            [0.70711, 0.40825, 0.40825, 0.40825],
            atol=1e-5,
        )

    def test_outputs_unit_norm(self):
        q1, q2 = default_endpoints()
        for k in (1, 2, 3, 5, 8):
            fs = slerp_frames(q1, q2, k)
            for q in fs.quaternions:
                assert abs(q.norm() - 1.0) < 1e-12

    def test_first_rotation_identity(self):
        fs = slerp_frames(*default_endpoints(), 3)
        np.testing.assert_allclose(fs.rotations[0], np.eye(3), atol=1e-12)

    def test_k3_pairwise_distinct(self):
        fs = slerp_frames(*default_endpoints(), 3)
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.abs(fs.rotations[i] - fs.rotations[j]).max() > 1e-3

    def test_equal_interval_angles(self):
        fs = slerp_frames(*default_endpoints(), 5)
        angles = [
            rotation_angle(fs.rotations[i].T @ fs.rotations[i + 1]) for i in range(4)
        ]
        assert max(angles) - min(angles) < 1e-9

    def test_collinear_rejected(self):
        q = Quaternion(1, 0, 0, 0)
        with pytest.raises(ValueError, match="collinear"):
            slerp_frames(q, q, 2)
        with pytest.raises(ValueError, match="collinear"):
            slerp_frames(q, Quaternion(-1, 0, 0, 0), 2)

    def test_k_zero_rejected(self):
        with pytest.raises(ValueError):
            slerp_frames(*default_endpoints(), 0)


class TestDefaultEndpoints:
    def test_orthogonal(self):
        q1, q2 = default_endpoints()
        assert abs(q1.dot(q2)) < 1e-15

    def test_unit(self):
        q1, q2 = default_endpoints()
        assert abs(q1.norm() - 1) < 1e-15 and abs(q2.norm() - 1) < 1e-15

    def test_exact_constants(self):
        q1, q2 = default_endpoints()
        assert q1 == Quaternion(1.0, 0.0, 0.0, 0.0)
        s3 = 1.0 / np.sqrt(3.0)
        np.testing.assert_allclose(q2.as_array(), [0.0, s3, s3, s3], atol=0)


class TestHelpers:
    def test_rotation_from_direction_maps_z(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            r = rotation_from_direction(d)
            np.testing.assert_allclose(r @ [0, 0, 1], d, atol=1e-9)
            np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(r) > 0

    def test_fibonacci_directions_distinct(self):
        d = fibonacci_directions(60)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
        dots = d @ d.T
        np.fill_diagonal(dots, -1.0)
        assert dots.max() < 1.0 - 1e-4  # pairwise min angle > 0

    def test_lattice_26(self):
        d = lattice_directions_26()
        assert d.shape == (26, 3)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)

    def test_rotation_about_z(self):
        r = rotation_about_z(np.pi / 2)
        np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    def test_frameset_lengths(self):
        fs = slerp_frames(*default_endpoints(), 4)
        assert fs.k == 4 == len(fs.rotations) == len(fs.quaternions)
        assert isinstance(fs, FrameSet)
