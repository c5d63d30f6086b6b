import numpy as np
import pytest

from occugrasp.pointcloud import PointCloud
from occugrasp.render import (
    Camera,
    depth_to_pointcloud,
    look_at_camera,
    merge_views,
    project,
    render_depth,
    render_scene_cloud,
    select_views,
)
from occugrasp.scenes import SdfPrimitive, SdfScene, random_scene, scene_sdf


def axis_camera():
    # camera at origin looking along +z
    return Camera(np.eye(3), np.zeros(3), 100.0, 100.0, 31.5, 23.5, 64, 48)


def sphere_ahead(radius=0.1, dist=1.0):
    prim = SdfPrimitive("sphere", np.eye(3), [0, 0, dist], [radius])
    bounds = np.array([[-1.0, -1.0, -0.5], [1.0, 1.0, 2.0]])
    return SdfScene([prim], table_height=-5.0, bounds=bounds)


class TestRenderDepth:
    def test_center_pixel_analytic(self):
        scene = sphere_ahead(0.1, 1.0)
        cam = axis_camera()
        depth = render_depth(scene, cam)
        # analytic ray-sphere intersection for the ray nearest the axis
        u, v = 31, 23  # closest pixel to the principal point (31.5, 23.5)
        d = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
        nd = d / np.linalg.norm(d)
        b = nd @ np.array([0, 0, 1.0])
        disc = b * b - (1.0 - 0.1**2)
        t_hit = b - np.sqrt(disc)
        expected_z = t_hit * nd[2]
        assert depth[v, u] == pytest.approx(expected_z, abs=1e-3)
        assert depth[v, u] == pytest.approx(0.9, abs=1e-3)

    def test_empty_scene_all_miss(self):
        scene = SdfScene([], table_height=-5.0, bounds=np.array([[-1, -1, -1], [1, 1, 1.0]]))
        # rays parallel to the table never reach z = -5
        depth = render_depth(scene, axis_camera())
        assert np.count_nonzero(depth) == 0

    def test_surface_consistency(self):
        scene = sphere_ahead(0.15, 0.8)
        cam = axis_camera()
        depth = render_depth(scene, cam)
        pts = depth_to_pointcloud(depth, cam)
        assert len(pts) > 0
        s = scene_sdf(scene, pts.points)
        assert np.abs(s).max() < 1e-3

    def test_miss_encodes_zero(self):
        depth = render_depth(sphere_ahead(0.05, 1.0), axis_camera())
        assert depth[0, 0] == 0.0


class TestUnprojection:
    def test_principal_point(self):
        cam = Camera(np.eye(3), np.zeros(3), 100.0, 100.0, 32.0, 24.0, 64, 48)
        depth = np.zeros((48, 64))
        depth[24, 32] = 1.0
        pts = depth_to_pointcloud(depth, cam)
        np.testing.assert_allclose(pts.points, [[0.0, 0.0, 1.0]])

    def test_empty_depth(self):
        pts = depth_to_pointcloud(np.zeros((48, 64)), axis_camera())
        assert len(pts) == 0

    def test_project_round_trip(self):
        cam = axis_camera()
        depth = np.zeros((48, 64))
        depth[10, 20] = 0.7
        pts = depth_to_pointcloud(depth, cam)
        u, v, d = project(pts.points[0], cam)
        assert u == pytest.approx(20, abs=1e-6)
        assert v == pytest.approx(10, abs=1e-6)
        assert d == pytest.approx(0.7, abs=1e-9)


class TestMergeViews:
    def test_identity_pose(self):
        c = PointCloud(np.random.default_rng(0).normal(size=(10, 3)))
        out = merge_views([c], [(np.eye(3), np.zeros(3))])
        np.testing.assert_allclose(out.points, c.points)

    def test_same_view_twice_doubles(self):
        c = PointCloud(np.random.default_rng(1).normal(size=(7, 3)))
        out = merge_views([c, c], [(np.eye(3), np.zeros(3))] * 2)
        assert len(out) == 14

    def test_mismatched_lengths(self):
        c = PointCloud(np.zeros((1, 3)))
        with pytest.raises(ValueError):
            merge_views([c], [])

    def test_opposing_views_cover_sphere(self):
        prim = SdfPrimitive("sphere", np.eye(3), [0, 0, 0], [0.1])
        scene = SdfScene([prim], table_height=-5.0,
                         bounds=np.array([[-0.3, -0.3, -0.3], [0.3, 0.3, 0.3]]))
        clouds, poses = [], []
        for eye in ([0.0, 0.0, 0.8], [0.0, 0.0, -0.8]):
            cam = look_at_camera(eye, [0, 0, 0], width=64, height=48, f=80)
            clouds.append(depth_to_pointcloud(render_depth(scene, cam), cam))
            poses.append((cam.rotation, cam.translation))
        merged = merge_views(clouds, poses)
        offs = merged.points / np.linalg.norm(merged.points, axis=1, keepdims=True)
        # both hemispheres present: some pair of normals nearly antipodal
        assert (offs @ offs.T).min() < -0.9


class TestViewSelection:
    def test_nesting(self):
        v1 = select_views(1, seed=5)
        v3 = select_views(3, seed=5)
        np.testing.assert_allclose(v1[0], v3[0])

    def test_deterministic(self):
        np.testing.assert_allclose(select_views(3, seed=2), select_views(3, seed=2))

    def test_render_scene_cloud_counts(self):
        scene = random_scene(seed=0)
        c1 = render_scene_cloud(scene, 1, seed=0)
        c3 = render_scene_cloud(scene, 3, seed=0)
        assert len(c3) > len(c1) > 1000
