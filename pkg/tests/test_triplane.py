import numpy as np
import pytest

from occugrasp import nn
from occugrasp.geometry import default_endpoints, slerp_frames
from occugrasp.nn import MLP, PlaneEncoder, flatten_params, set_flat_params, tensor
from occugrasp.triplane import (
    PointEncoder,
    TriplaneCounters,
    build_triplanes,
    encode_planes,
    encode_points,
    normalize_density,
    project_group,
    query_global,
    read_tpl1,
    write_tpl1,
)


def rng():
    return np.random.default_rng(0)


def unit_cloud(n, seed=0):
    return np.random.default_rng(seed).uniform(0.05, 0.95, size=(n, 3))


def make_stack(cloud, emb, k=2, h=6, w=6):
    frames = slerp_frames(*default_endpoints(), k)
    return build_triplanes(cloud, emb, frames, h, w)


class TestEncodePoints:
    def test_zero_params_zero_embeddings(self):
        enc = PointEncoder(8, rng())
        set_flat_params(enc.params(), np.zeros(flatten_params(enc.params()).size))
        out = encode_points(enc, unit_cloud(50))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_permutation_equivariant(self):
        enc = PointEncoder(8, rng())
        cloud = unit_cloud(40)
        perm = np.random.default_rng(1).permutation(40)
        a = encode_points(enc, cloud).data
        b = encode_points(enc, cloud[perm]).data
        np.testing.assert_allclose(b, a[perm])

    def test_same_voxel_same_neighborhood_feature(self):
        # two points in one 5 mm voxel share the neighborhood-centroid input
        enc = PointEncoder(4, rng())
        cloud = np.array([[0.5001, 0.5001, 0.5001], [0.5002, 0.5002, 0.5002], [0.9, 0.9, 0.9]])
        from occugrasp.pointcloud import neighborhood_centroids

        cen = neighborhood_centroids(cloud, 0.005)
        np.testing.assert_allclose(cen[0], cen[1])
        np.testing.assert_allclose(cen[0], cloud[:2].mean(axis=0))

    def test_unnormalized_rejected(self):
        enc = PointEncoder(4, rng())
        with pytest.raises(ValueError, match="normalized"):
            encode_points(enc, np.array([[0.5, 0.5, 1.7]]))


class TestProjectGroup:
    def test_single_point_density(self):
        emb = tensor(np.ones((1, 3)))
        g = project_group(np.array([[0.4, 0.6, 0.2]]), emb, np.eye(3), 8, 8)
        for i in range(3):
            assert g.density[i].sum() == 1
            assert (g.density[i] > 0).sum() == 1

    def test_two_points_same_cell_on_z_plane(self):
        # identity rotation, points differing only in z share the z-dropping cell
        cloud = np.array([[0.31, 0.71, 0.2], [0.31, 0.71, 0.9]])
        emb = tensor(np.array([[1.0, 5.0], [3.0, 2.0]]))
        g = project_group(cloud, emb, np.eye(3), 4, 4)
        assert g.density[2].max() == 2
        cell = np.argwhere(g.density[2] == 2)[0]
        flat = cell[0] * 4 + cell[1]
        np.testing.assert_array_equal(g.raw_flat[2].data[flat], [3.0, 5.0])

    def test_total_density_is_n(self):
        cloud = unit_cloud(123, seed=5)
        emb = tensor(np.zeros((123, 2)))
        frames = slerp_frames(*default_endpoints(), 3)
        for rot in frames.rotations:
            g = project_group(cloud, emb, rot, 5, 7)
            for i in range(3):
                assert g.density[i].sum() == 123

    def test_matches_binning_oracle_identity(self):
        # K=1 identity: planes are axis-aligned orthographic projections
        cloud = unit_cloud(60, seed=9)
        c = 4
        emb_np = np.random.default_rng(2).normal(size=(60, c))
        g = project_group(cloud, tensor(emb_np), np.eye(3), 5, 5)
        lo, hi = cloud.min(axis=0), cloud.max(axis=0)
        unit = (cloud - lo) / (hi - lo)
        axes = ((1, 2), (0, 2), (0, 1))
        for i in range(3):
            ua, va = axes[i]
            ix = np.clip((unit[:, ua] * 5).astype(int), 0, 4)
            iy = np.clip((unit[:, va] * 5).astype(int), 0, 4)
            for cy in range(5):
                for cx in range(5):
                    mask = (ix == cx) & (iy == cy)
                    expected = emb_np[mask].max(axis=0) if mask.any() else np.zeros(c)
                    np.testing.assert_allclose(g.raw_flat[i].data[cy * 5 + cx], expected)
                    assert g.density[i][cy, cx] == mask.sum()

    def test_permutation_invariant_distinct_values(self):
        cloud = unit_cloud(30, seed=3)
        emb_np = np.arange(30.0)[:, None] * np.ones((1, 2))
        perm = np.random.default_rng(4).permutation(30)
        a = project_group(cloud, tensor(emb_np), np.eye(3), 4, 4)
        b = project_group(cloud[perm], tensor(emb_np[perm]), np.eye(3), 4, 4)
        for i in range(3):
            np.testing.assert_allclose(a.raw_flat[i].data, b.raw_flat[i].data)


class TestNormalizeDensity:
    def test_uniform(self):
        out = normalize_density(np.full((3, 4), 7))
        np.testing.assert_allclose(out, 1.0 / 12)

    def test_two_cell_softmax(self):
        for k in (1, 3, 10):
            out = normalize_density(np.array([[k, 0]]))
            np.testing.assert_allclose(out, [[np.e**k / (np.e**k + 1), 1 / (np.e**k + 1)]])

    def test_sums_to_one(self):
        out = normalize_density(np.random.default_rng(0).integers(0, 50, size=(8, 8)))
        assert abs(out.sum() - 1.0) < 1e-12


class TestEncodePlanes:
    def test_zero_params_zero_planes(self):
        cloud = unit_cloud(30)
        emb = tensor(np.random.default_rng(1).normal(size=(30, 3)))
        stack = make_stack(cloud, emb)
        encs = [PlaneEncoder(4, 5, np.random.default_rng(i)) for i in range(3)]
        for e in encs:
            set_flat_params(e.params(), np.zeros(flatten_params(e.params()).size))
        encode_planes(stack, encs)
        for i in range(3):
            np.testing.assert_array_equal(stack.encoded_flat[i].data, 0.0)

    def test_weight_sharing_across_groups(self):
        # identical raw planes in two groups encode identically
        cloud = unit_cloud(30, seed=2)
        emb = tensor(np.random.default_rng(3).normal(size=(30, 3)))
        g = project_group(cloud, emb, np.eye(3), 6, 6)
        frames = slerp_frames(*default_endpoints(), 2)
        stack = build_triplanes(cloud, emb, frames, 6, 6)
        stack.groups = [g, g]  # force identical raw planes
        encs = [PlaneEncoder(4, 5, np.random.default_rng(i)) for i in range(3)]
        encode_planes(stack, encs)
        hw = 36
        for i in range(3):
            np.testing.assert_allclose(
                stack.encoded_flat[i].data[:hw], stack.encoded_flat[i].data[hw:]
            )

    def test_output_channels(self):
        cloud = unit_cloud(30)
        emb = tensor(np.zeros((30, 4)))
        stack = make_stack(cloud, emb)
        encs = [PlaneEncoder(5, 7, np.random.default_rng(i)) for i in range(3)]
        encode_planes(stack, encs)
        assert stack.c_t == 7
        assert stack.encoded_flat[0].data.shape == (2 * 36, 7)

    def test_density_channel_mismatch(self):
        cloud = unit_cloud(20)
        emb = tensor(np.zeros((20, 4)))
        stack = make_stack(cloud, emb)
        encs = [PlaneEncoder(4, 3, np.random.default_rng(i)) for i in range(3)]  # expects no density
        with pytest.raises(ValueError, match="channels"):
            encode_planes(stack, encs, use_density=True)


def encoded_stack(k=2, h=6, w=6, c_t=5, n=50, seed=0):
    cloud = unit_cloud(n, seed=seed)
    emb = tensor(np.random.default_rng(seed + 1).normal(size=(n, 4)))
    frames = slerp_frames(*default_endpoints(), k)
    stack = build_triplanes(cloud, emb, frames, h, w)
    encs = [PlaneEncoder(5, c_t, np.random.default_rng(10 + i)) for i in range(3)]
    encode_planes(stack, encs)
    return stack, cloud


def make_fusers(k, c_t, out=6):
    e1 = MLP([3 * c_t, 8, c_t], np.random.default_rng(20))
    e2 = MLP([k * c_t, 8, out], np.random.default_rng(21))
    return e1, e2


class TestQueryGlobal:
    def test_query_at_cell_center_reads_cell(self):
        stack, cloud = encoded_stack(k=1, h=6, w=6)
        # identity rotation group: invert the per-group affine for a cell center
        g = stack.groups[0]
        target = np.array([2, 3])  # (iy, ix) on the z-dropping plane (plane 2)
        uv = np.array([(target[1] + 0.5) / 6, (target[0] + 0.5) / 6])
        world = np.empty(3)
        world[:2] = uv * (g.hi[:2] - g.lo[:2]) + g.lo[:2]
        world[2] = cloud.mean(axis=0)[2]

        # single-plane read oracle through the bilinear machinery
        from occugrasp.triplane import _bilinear_corners, _rotated_unit

        unit, _, _ = _rotated_unit(world[None], g.rotation, g.lo, g.hi)
        idx, wts = _bilinear_corners(unit[:, [0, 1]], 6, 6)
        blended = sum(w * stack.encoded_flat[2].data[i] for i, w in zip(idx, wts))[0]
        np.testing.assert_allclose(blended, stack.encoded_flat[2].data[target[0] * 6 + target[1]], atol=1e-12)

    def test_constant_plane_constant_feature(self):
        stack, cloud = encoded_stack(k=1)
        for i in range(3):
            stack.encoded_flat[i] = tensor(np.ones_like(stack.encoded_flat[i].data) * (i + 1))
        e1, e2 = make_fusers(1, 5)
        qs = np.random.default_rng(3).uniform(0.2, 0.8, size=(10, 3))
        out = query_global(stack, (e1, e2), qs).data
        for row in out[1:]:
            np.testing.assert_allclose(row, out[0], atol=1e-12)

    def test_midpoint_is_mean_of_four_cells(self):
        stack, _ = encoded_stack(k=1, h=4, w=4)
        plane = stack.encoded_flat[0].data.copy()
        from occugrasp.triplane import _bilinear_corners

        # midpoint of cells (1,1),(1,2),(2,1),(2,2): u=(2)/4, v=(2)/4
        uv = np.array([[0.5, 0.5]])
        idx, wts = _bilinear_corners(uv, 4, 4)
        np.testing.assert_allclose(np.array(wts).ravel(), 0.25)
        blended = sum(w * plane[i] for i, w in zip(idx, wts))[0]
        expected = (plane[1 * 4 + 1] + plane[1 * 4 + 2] + plane[2 * 4 + 1] + plane[2 * 4 + 2]) / 4
        np.testing.assert_allclose(blended, expected, atol=1e-12)

    def test_continuity(self):
        stack, _ = encoded_stack(k=2)
        e1, e2 = make_fusers(2, 5)
        q = np.array([[0.4, 0.5, 0.6]])
        a = query_global(stack, (e1, e2), q).data
        b = query_global(stack, (e1, e2), q + 1e-9).data
        assert np.abs(a - b).max() < 1e-6

    def test_out_of_domain_rejected(self):
        stack, _ = encoded_stack()
        e1, e2 = make_fusers(2, 5)
        with pytest.raises(ValueError, match="domain"):
            query_global(stack, (e1, e2), np.array([[1.2, 0.5, 0.5]]))

    def test_border_clamp_inside_margin(self):
        stack, _ = encoded_stack()
        e1, e2 = make_fusers(2, 5)
        out = query_global(stack, (e1, e2), np.array([[1.04, -0.04, 0.5]]))
        assert np.all(np.isfinite(out.data))


class TestCostCounters:
    def test_projection_touches_3k_n(self):
        cloud = unit_cloud(77)
        emb = tensor(np.zeros((77, 4)))
        for k in (1, 3):
            frames = slerp_frames(*default_endpoints(), k)
            stack = build_triplanes(cloud, emb, frames, 4, 4)
            assert stack.counters.points_projected == 3 * k * 77

    def test_query_cost_formula(self):
        stack, _ = encoded_stack(k=3, n=40)
        e1, e2 = make_fusers(3, 5)
        qs = np.random.default_rng(5).uniform(0.3, 0.7, size=(11, 3))
        query_global(stack, (e1, e2), qs)
        assert stack.counters.bilinear_reads == 11 * 3 * 3
        assert stack.counters.fuser_calls == 2 * 11
        assert stack.counters.queried_points == 11


class TestTpl1:
    def test_round_trip(self, tmp_path):
        stack, _ = encoded_stack(k=2, h=4, w=4, c_t=3)
        path = tmp_path / "planes.tpl1"
        write_tpl1(path, stack)
        arr = read_tpl1(path)
        assert arr.shape == (2, 3, 3, 4, 4)
        expected = stack.encoded_flat[1].data[:16].reshape(4, 4, 3).transpose(2, 0, 1)
        np.testing.assert_allclose(arr[0, 1], expected, atol=1e-6)
