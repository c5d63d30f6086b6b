import numpy as np
import pytest

from occugrasp.geometry import fibonacci_directions, rotation_from_direction
from occugrasp.oracle import (
    affordance_labels,
    grasp_oracle,
    oracle_batch,
    pool_label_tables,
    pose_grid_rotations,
)
from occugrasp.scenes import SdfPrimitive, SdfScene, random_scene


def resting_sphere(radius=0.03):
    prim = SdfPrimitive("sphere", np.eye(3), [0, 0, 0.1], [radius])
    bounds = np.array([[-0.3, -0.3, -0.06], [0.3, 0.3, 0.4]])
    return SdfScene([prim], table_height=0.0, bounds=bounds)


def down_pose(p_g, depth, width):
    rot = rotation_from_direction([0.0, 0.0, -1.0])
    return (np.asarray(p_g, dtype=float), rot, depth, width)


class TestGraspOracle:
    def test_diametral_pinch_succeeds(self):
        scene = resting_sphere(0.03)
        # grasp point on top of the sphere, closing line through the center
        pose = down_pose([0, 0, 0.13], depth=0.03, width=0.07)
        assert grasp_oracle(scene, pose, mu=1.0)
        # normals are exactly antipodal along the closing axis
        mu_star, closing, feasible = oracle_batch(
            scene, pose[0][None], pose[1][None], [pose[2]], [pose[3]]
        )
        assert feasible[0]
        assert mu_star[0] == pytest.approx(0.0, abs=1e-3)
        assert closing[0] == pytest.approx(0.06, abs=1e-4)

    def test_narrow_width_fails(self):
        scene = resting_sphere(0.03)
        pose = down_pose([0, 0, 0.13], depth=0.03, width=0.04)
        assert not grasp_oracle(scene, pose, mu=1.0)

    def test_tangent_closing_axis_fails(self):
        scene = resting_sphere(0.03)
        # closing line grazes the sphere at y = r: contact angle ~90 degrees
        rot = rotation_from_direction([0.0, 0.0, -1.0])
        pose = (np.array([0.0, 0.03, 0.13]), rot, 0.03, 0.07)
        assert not grasp_oracle(scene, pose, mu=0.2)

    def test_non_finite_pose_rejected(self):
        scene = resting_sphere()
        with pytest.raises(ValueError, match="non-finite"):
            grasp_oracle(scene, (np.array([np.nan, 0, 0]), np.eye(3), 0.02, 0.05), 0.8)

    def test_friction_monotone(self):
        scene = random_scene(seed=2)
        rng = np.random.default_rng(0)
        surface = []
        for obj in scene.objects:
            surface.append(obj.translation + [0, 0, obj.bounding_radius() * 0.5])
        pts = np.array(surface)
        dirs = fibonacci_directions(8)
        mus = [0.2, 0.4, 0.6, 0.8, 1.0, 1.2]
        for p in pts:
            for d in dirs[:4]:
                rot = rotation_from_direction(d)
                results = [
                    grasp_oracle(scene, (p, rot, 0.02, 0.08), mu) for mu in mus
                ]
                # once successful, success persists for larger mu
                for a, b in zip(results[:-1], results[1:]):
                    assert (not a) or b

    def test_mu_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            grasp_oracle(resting_sphere(), down_pose([0, 0, 0.13], 0.03, 0.07), 0.0)

    def test_collision_with_neighbor_fails(self):
        # a wall right next to the sphere blocks the finger sweep
        sphere = SdfPrimitive("sphere", np.eye(3), [0, 0, 0.1], [0.03])
        wall = SdfPrimitive("box", np.eye(3), [0.05, 0, 0.1], [0.008, 0.05, 0.12])
        scene = SdfScene([sphere, wall], table_height=0.0,
                         bounds=np.array([[-0.3, -0.3, -0.06], [0.3, 0.3, 0.4]]))
        pose = down_pose([0, 0, 0.13], depth=0.03, width=0.07)
        assert not grasp_oracle(scene, pose, mu=1.0)


class TestBatchConsistency:
    def test_batch_matches_scalar(self):
        scene = random_scene(seed=7)
        rng = np.random.default_rng(3)
        n = 40
        pts = rng.uniform(-0.1, 0.1, size=(n, 3)) + [0, 0, 0.05]
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        rots = np.stack([rotation_from_direction(d) for d in dirs])
        depths = rng.uniform(0.01, 0.04, size=n)
        widths = rng.uniform(0.02, 0.1, size=n)
        mu_star, _, feasible = oracle_batch(scene, pts, rots, depths, widths)
        for i in range(n):
            for mu in (0.4, 0.8):
                single = grasp_oracle(scene, (pts[i], rots[i], depths[i], widths[i]), mu)
                assert single == bool(feasible[i] and mu_star[i] <= mu)


class TestPoseGrid:
    def test_grid_layout(self):
        rots, depths = pose_grid_rotations(np.eye(3))
        assert rots.shape == (48, 3, 3)
        np.testing.assert_allclose(depths[:4], [0.01, 0.02, 0.03, 0.04])
        # rotation-major flat order: cell 4 starts the 15-degree rotation
        np.testing.assert_allclose(rots[4] @ [1, 0, 0],
                                   [np.cos(np.deg2rad(15)), np.sin(np.deg2rad(15)), 0],
                                   atol=1e-12)


class TestLabels:
    def test_sphere_top_graspable(self):
        scene = resting_sphere(0.025)
        pts = np.array([[0.0, 0.0, 0.125], [0.28, 0.28, 0.0]])  # sphere top, bare table
        labels = affordance_labels(scene, pts)
        assert labels[0]
        assert not labels[1]

    def test_pool_tables_shapes_and_signal(self):
        # a box tolerates tilted approaches, so a coarse direction set suffices
        box = SdfPrimitive("box", np.eye(3), [0, 0, 0.03], [0.02, 0.03, 0.03])
        scene = SdfScene([box], table_height=0.0,
                         bounds=np.array([[-0.3, -0.3, -0.06], [0.3, 0.3, 0.4]]))
        pool = np.array([[0.0, 0.0, 0.06]])
        dirs = np.vstack([fibonacci_directions(12), [0.0, 0.0, -1.0]])
        success, widths = pool_label_tables(scene, pool, dirs)
        assert success.shape == (1, 13, 48)
        assert widths.shape == (1, 13, 48)
        assert success[0, 12].sum() >= 8  # straight-down grasps on a flat box
        assert success.sum() > success[0, 12].sum()  # tilted ones contribute too
        assert np.all(widths[success.astype(bool)] > 0)
        assert np.all(widths <= 0.1 + 1e-6)

    def test_labels_deterministic(self):
        scene = random_scene(seed=9)
        pts = np.array([o.translation + [0, 0, o.bounding_radius() * 0.6] for o in scene.objects])
        a = affordance_labels(scene, pts)
        b = affordance_labels(scene, pts)
        np.testing.assert_array_equal(a, b)
