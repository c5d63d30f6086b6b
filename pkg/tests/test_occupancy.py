import numpy as np
import pytest

from occugrasp import nn
from occugrasp.geometry import rotation_from_direction
from occugrasp.nn import MLP, flatten_params, set_flat_params, tensor
from occugrasp.occupancy import (
    GraspRegionSpec,
    LocalOccupancyRegion,
    build_region,
    crop_ground_truth,
    cylinder_mask,
    decode_occupancy,
    local_context,
    nearest_candidates,
    prediction_to_grid,
    sample_training_voxels,
)
from occugrasp.scenes import OccupancyGrid, SdfPrimitive, SdfScene, ground_truth_occupancy


def default_spec():
    return GraspRegionSpec()


def brute_force_region(candidates, spec, span=0.2):
    """Exhaustive grid scan over a box certainly containing every cylinder."""
    lo = np.floor((np.min([p for p, _ in candidates], axis=0) - span) / spec.v).astype(int)
    hi = np.floor((np.max([p for p, _ in candidates], axis=0) + span) / spec.v).astype(int)
    out = set()
    for ix in range(lo[0], hi[0] + 1):
        for iy in range(lo[1], hi[1] + 1):
            for iz in range(lo[2], hi[2] + 1):
                c = (np.array([ix, iy, iz]) + 0.5) * spec.v
                for p, rot in candidates:
                    local = rot.T @ (c - p)
                    if local[0] ** 2 + local[1] ** 2 <= spec.r**2 and spec.d_min <= local[2] <= spec.d_max:
                        out.add((ix, iy, iz))
                        break
    return out


class TestBuildRegion:
    def test_matches_brute_force_default(self):
        spec = default_spec()
        cands = [(np.zeros(3), np.eye(3))]
        region = build_region(cands, spec)
        expected = brute_force_region(cands, spec)
        assert {tuple(v) for v in region.voxels} == expected

    def test_matches_brute_force_random_instances(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            spec = GraspRegionSpec(
                r=rng.uniform(0.02, 0.05),
                d_min=-rng.uniform(0.005, 0.02),
                d_max=rng.uniform(0.02, 0.05),
                v=0.01,
            )
            cands = []
            for _ in range(rng.integers(1, 4)):
                d = rng.normal(size=3)
                d /= np.linalg.norm(d)
                cands.append((rng.uniform(-0.1, 0.1, 3), rotation_from_direction(d)))
            region = build_region(cands, spec)
            assert {tuple(v) for v in region.voxels} == brute_force_region(cands, spec)

    def test_duplicate_candidates_dedup(self):
        spec = default_spec()
        cand = (np.array([0.01, 0.02, 0.05]), rotation_from_direction([0, 0, -1.0]))
        one = build_region([cand], spec)
        two = build_region([cand, cand], spec)
        np.testing.assert_array_equal(one.voxels, two.voxels)

    def test_default_spec_constants(self):
        spec = default_spec()
        assert spec.r == 0.05 and spec.d_min == -0.01 and spec.d_max == 0.04 and spec.v == 0.01

    def test_budget_exceeded(self):
        spec = GraspRegionSpec(budget=10)
        with pytest.raises(ValueError, match="budget"):
            build_region([(np.zeros(3), np.eye(3))], spec)

    def test_empty_candidates(self):
        with pytest.raises(ValueError):
            build_region([], default_spec())

    def test_owner_nearest_lower_index_ties(self):
        spec = default_spec()
        p = np.array([0.0, 0.0, 0.0])
        region = build_region([(p, np.eye(3)), (p.copy(), np.eye(3))], spec)
        assert np.all(region.owner == 0)

    def test_invariant_slackened_cylinder(self):
        spec = default_spec()
        cands = [(np.array([0.02, -0.01, 0.08]), rotation_from_direction([0.3, 0.2, -0.9]))]
        region = build_region(cands, spec)
        p, rot = cands[0]
        local = (region.centers - p) @ rot
        radial = np.sqrt(local[:, 0] ** 2 + local[:, 1] ** 2)
        assert np.all(radial <= spec.r + spec.v / 2 + 1e-12)
        assert np.all(local[:, 2] >= spec.d_min - spec.v / 2 - 1e-12)
        assert np.all(local[:, 2] <= spec.d_max + spec.v / 2 + 1e-12)

    def test_coverage_of_cylinder_interior(self):
        # every GT-occupied voxel center inside a candidate cylinder is in the region
        spec = default_spec()
        prim = SdfPrimitive("sphere", np.eye(3), [0, 0, 0.08], [0.03])
        scene = SdfScene([prim], table_height=0.0,
                         bounds=np.array([[-0.2, -0.2, -0.02], [0.2, 0.2, 0.2]]))
        gt = ground_truth_occupancy(scene, spec.v)
        cand = (np.array([0.0, 0.0, 0.11]), rotation_from_direction([0, 0, -1.0]))
        region = build_region([cand], spec)
        region_set = {tuple(v) for v in region.voxels}
        centers = gt.centers()[gt.occupancy]
        inside = cylinder_mask(centers, cand[0], cand[1], spec)
        shift = np.round(gt.origin / spec.v).astype(int)
        for c in centers[inside]:
            idx = tuple(np.floor(c / spec.v).astype(int))
            assert idx in region_set


class TestLocalContext:
    def test_query_at_candidate(self):
        cands = np.array([[0.1, 0.2, 0.3], [0.5, 0.5, 0.5]])
        near = nearest_candidates(np.array([[0.1, 0.2, 0.3]]), cands)
        assert near[0] == 0

    def test_nearer_second(self):
        cands = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        assert nearest_candidates(np.array([[0.9, 0.0, 0.0]]), cands)[0] == 1

    def test_matches_brute_force_scan(self):
        rng = np.random.default_rng(1)
        qs = rng.uniform(size=(50, 3))
        cands = rng.uniform(size=(10, 3))
        near = nearest_candidates(qs, cands)
        for i, q in enumerate(qs):
            d = np.linalg.norm(cands - q, axis=1)
            assert near[i] == np.argmin(d)

    def test_feature_layout(self):
        rng = np.random.default_rng(2)
        pe = MLP([9, 4, 4], rng)
        emb = tensor(rng.normal(size=(3, 5)))
        cands = rng.uniform(size=(3, 3))
        q = cands[1][None] + 1e-9
        out = local_context(q, cands, emb, pe)
        assert out.data.shape == (1, 5 + 4)
        np.testing.assert_allclose(out.data[0, :5], emb.data[1])
        pe_in = np.concatenate([q[0], cands[1], q[0] - cands[1]])
        np.testing.assert_allclose(out.data[0, 5:], pe(tensor(pe_in[None])).data[0])


class TestQueryOccupancy:
    def test_zero_decoder_all_half(self):
        rng = np.random.default_rng(3)
        dec = MLP([6, 4, 1], rng)
        set_flat_params(dec.params(), np.zeros(flatten_params(dec.params()).size))
        feats = tensor(rng.normal(size=(7, 6)))
        probs = decode_occupancy(feats, dec)
        np.testing.assert_array_equal(probs.data, 0.5)
        assert (probs.data > 0.5).sum() == 0  # strict threshold: occupied empty

    def test_output_length(self):
        rng = np.random.default_rng(4)
        dec = MLP([6, 4, 1], rng)
        feats = tensor(rng.normal(size=(11, 6)))
        assert decode_occupancy(feats, dec).data.shape == (11,)


class TestCropGroundTruth:
    def grid(self, occupied_sphere=None):
        bounds = np.array([[-0.1, -0.1, -0.1], [0.1, 0.1, 0.1]])
        objs = [] if occupied_sphere is None else [occupied_sphere]
        scene = SdfScene(objs, table_height=-1.0, bounds=bounds)
        return ground_truth_occupancy(scene, 0.01), scene

    def test_free_space_all_zero(self):
        gt, _ = self.grid()
        region = build_region([(np.zeros(3), np.eye(3))], default_spec())
        assert crop_ground_truth(region, gt).sum() == 0

    def test_inside_sphere_matches_sdf_sign(self):
        prim = SdfPrimitive("sphere", np.eye(3), [0, 0, 0], [0.04])
        gt, scene = self.grid(prim)
        region = build_region([(np.zeros(3), np.eye(3))], default_spec())
        bits = crop_ground_truth(region, gt)
        from occugrasp.scenes import scene_sdf

        in_grid = np.all(np.abs(region.centers) < 0.1 - 1e-9, axis=1)
        expected = (scene_sdf(scene, region.centers) <= 0) & in_grid
        np.testing.assert_array_equal(bits, expected)

    def test_length_is_m(self):
        gt, _ = self.grid()
        region = build_region([(np.zeros(3), np.eye(3))], default_spec())
        assert crop_ground_truth(region, gt).shape == (len(region),)

    def test_misaligned_voxel_size(self):
        gt = OccupancyGrid([0, 0, 0], 0.02, [4, 4, 4], np.zeros(64, dtype=bool))
        region = build_region([(np.zeros(3), np.eye(3))], default_spec())
        with pytest.raises(ValueError, match="misaligned"):
            crop_ground_truth(region, gt)

    def test_misaligned_origin(self):
        gt = OccupancyGrid([0.005, 0, 0], 0.01, [4, 4, 4], np.zeros(64, dtype=bool))
        region = build_region([(np.zeros(3), np.eye(3))], default_spec())
        with pytest.raises(ValueError, match="misaligned"):
            crop_ground_truth(region, gt)


class TestSampleTrainingVoxels:
    def region(self, m):
        voxels = np.stack([np.arange(m), np.zeros(m, int), np.zeros(m, int)], axis=1)
        return LocalOccupancyRegion(
            voxels=voxels, centers=(voxels + 0.5) * 0.01, owner=np.zeros(m, dtype=np.intp),
            spec=default_spec(),
        )

    def test_small_keeps_all(self):
        r = self.region(100)
        idx, centers, gt = sample_training_voxels(r, np.zeros(100, bool), 15000, seed=0)
        assert len(idx) == 100

    def test_large_unique_subset(self):
        r = self.region(30000)
        idx, centers, gt = sample_training_voxels(r, np.zeros(30000, bool), 15000, seed=0)
        assert len(idx) == 15000 and len(np.unique(idx)) == 15000

    def test_class_ratio_preserved(self):
        m = 100_000
        r = self.region(m)
        gt = np.zeros(m, bool)
        gt[: int(0.23 * m)] = True
        ratios = []
        for seed in range(20):
            _, _, sub = sample_training_voxels(r, gt, 15000, seed=seed)
            ratios.append(sub.mean())
        assert abs(np.mean(ratios) - 0.23) < 0.03 * 0.23 + 0.003

    def test_deterministic(self):
        r = self.region(30000)
        a, _, _ = sample_training_voxels(r, np.zeros(30000, bool), 1000, seed=5)
        b, _, _ = sample_training_voxels(r, np.zeros(30000, bool), 1000, seed=5)
        np.testing.assert_array_equal(a, b)


class TestPredictionExport:
    def test_round_trip_bits(self):
        region = build_region([(np.array([0.0, 0.0, 0.05]), np.eye(3))], default_spec())
        occupied = np.zeros(len(region), dtype=bool)
        occupied[::3] = True
        grid = prediction_to_grid(region, occupied)
        hits = grid.lookup(region.centers)
        np.testing.assert_array_equal(hits, occupied)
