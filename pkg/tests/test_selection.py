import numpy as np
import pytest

from nerfloc.errors import InsufficientOverlapError
from nerfloc.field import FieldConfig, init_field
from nerfloc.geometry import project
from nerfloc.selection import (MatchPairSet, PerDimCost, SelectionMask,
                               accumulate_costs, brute_force_selection,
                               generate_gt_pairs, load_mask,
                               perturb_pose, save_mask, selection_objective,
                               solve_selection)
from nerfloc.synthscene import default_intrinsics, make_trajectory, plane_scene

SMALL = FieldConfig(l_pos=3, d_pos=10, l_dir=1, trunk_width=16, trunk_depth=2, d_mlp=6)


def pair_set(f2d, f3d):
    from nerfloc.geometry import Pose
    return MatchPairSet(f2d=np.asarray(f2d, dtype=np.float64),
                        f3d=np.asarray(f3d, dtype=np.float64),
                        pixels_2d=np.zeros((len(f2d), 2), dtype=np.int64),
                        points_3d=np.zeros((len(f2d), 3)),
                        database_pose=Pose.identity(), perturbed_pose=Pose.identity())


class TestAccumulateCosts:
    def test_identical_pair_gives_zero(self):
        cost = accumulate_costs(pair_set([[1.0, 2.0, 3.0]], [[1.0, 2.0, 3.0]]))
        np.testing.assert_array_equal(cost.c, 0.0)

    def test_single_dim_difference(self):
        cost = accumulate_costs(pair_set([[0.0, 0.3, 0.0]], [[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(cost.c, [0.0, 0.3, 0.0], atol=1e-15)

    def test_duplicated_pairs_double_costs(self):
        one = accumulate_costs(pair_set([[1.0, -2.0]], [[0.5, 0.5]]))
        two = accumulate_costs(pair_set([[1.0, -2.0]] * 2, [[0.5, 0.5]] * 2))
        np.testing.assert_allclose(two.c, 2.0 * one.c, atol=1e-15)

    def test_squared_metric(self):
        cost = accumulate_costs(pair_set([[2.0]], [[0.0]]), metric="squared")
        assert cost.c[0] == 4.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            accumulate_costs(pair_set(np.zeros((0, 3)), np.zeros((0, 3))))


class TestSolveSelection:
    def test_exact_budget_two_cheapest(self):
        mask = solve_selection(PerDimCost(np.array([1.0, 2.0, 3.0, 4.0]), 1), 2)
        np.testing.assert_array_equal(mask.mask, [1, 1, 0, 0])

    def test_as_written_prefers_single_cheapest(self):
        """Verified against full enumeration: the ratio objective picks {0}
        (mean 1) over {0, 1} (mean 1.5)."""
        cost = PerDimCost(np.array([1.0, 2.0, 3.0, 4.0]), 1)
        mask = solve_selection(cost, 2, mode="as-written")
        np.testing.assert_array_equal(mask.mask, [1, 0, 0, 0])
        oracle = brute_force_selection(cost, 2, mode="as-written")
        np.testing.assert_array_equal(mask.mask, oracle.mask)

    def test_uniform_costs_tie_break_to_low_dims(self):
        mask = solve_selection(PerDimCost(np.ones(6), 1), 3)
        np.testing.assert_array_equal(mask.mask, [1, 1, 1, 0, 0, 0])

    def test_budget_validation(self):
        with pytest.raises(ValueError):
            solve_selection(PerDimCost(np.ones(4), 1), 5)
        with pytest.raises(ValueError):
            solve_selection(PerDimCost(np.ones(4), 1), 0)

    def test_oracle_equivalence_random(self):
        """Solver and exhaustive oracle agree exactly (mask and objective) on
        random costs, both modes, including ties from quantized costs."""
        rng = np.random.default_rng(0)
        for trial in range(60):
            d = int(rng.integers(2, 13))
            c = rng.integers(0, 4, size=d).astype(np.float64) if trial % 2 \
                else rng.uniform(0, 1, size=d)
            cost = PerDimCost(c, 1)
            for mode in ("exact-budget", "as-written"):
                for n_s in (1, max(1, d // 2), d):
                    fast = solve_selection(cost, n_s, mode)
                    slow = brute_force_selection(cost, n_s, mode)
                    np.testing.assert_array_equal(fast.mask, slow.mask)
                    assert selection_objective(cost, fast.mask, mode) == \
                        selection_objective(cost, slow.mask, mode)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        c = rng.uniform(0, 5, size=10)
        for mode in ("exact-budget", "as-written"):
            a = solve_selection(PerDimCost(c, 1), 4, mode)
            b = solve_selection(PerDimCost(3.7 * c, 1), 4, mode)
            np.testing.assert_array_equal(a.mask, b.mask)

    def test_budget_monotone_nesting(self):
        rng = np.random.default_rng(2)
        c = rng.uniform(0, 1, size=12)
        prev = set()
        for n_s in range(1, 13):
            sel = set(solve_selection(PerDimCost(c, 1), n_s).indices.tolist())
            assert prev <= sel
            prev = sel

    def test_full_budget_selects_everything(self):
        mask = solve_selection(PerDimCost(np.arange(5, dtype=float), 1), 5)
        assert mask.selected_count == 5

    def test_single_dim(self):
        mask = brute_force_selection(PerDimCost(np.array([2.0]), 1), 1)
        np.testing.assert_array_equal(mask.mask, [1])


class TestSelectionMask:
    def test_zero_selection_rejected(self):
        with pytest.raises(ValueError):
            SelectionMask(np.zeros(4, dtype=int), 2)

    def test_io_roundtrip_bitwise(self, tmp_path):
        mask = SelectionMask(np.array([1, 0, 1, 1, 0]), 3, "exact-budget")
        path = tmp_path / "mask.txt"
        save_mask(mask, path)
        loaded = load_mask(path)
        save_mask(loaded, tmp_path / "mask2.txt")
        assert path.read_bytes() == (tmp_path / "mask2.txt").read_bytes()
        np.testing.assert_array_equal(loaded.mask, mask.mask)
        assert (loaded.budget, loaded.mode) == (3, "exact-budget")


class TestGtPairs:
    def scene_setup(self):
        scene = plane_scene()
        intr = default_intrinsics(24)
        pose = make_trajectory(scene, "ring", 4)[0]
        params = init_field(SMALL, scene.bounds, rng_seed=0)
        return scene, intr, pose, params

    def test_zero_perturbation_matches_everything(self):
        """With no perturbation, both views render identically: every opaque
        pixel matches itself and survives the reprojection filter."""
        scene, intr, pose, params = self.scene_setup()
        pairs = generate_gt_pairs(params, pose, intr, trans_frac=0.0,
                                  rot_max_deg=0.0, rng_seed=1, stride=2, n_samples=24)
        assert len(pairs) > 30
        np.testing.assert_array_equal(pairs.f2d, pairs.f3d)

    def test_disjoint_views_raise(self):
        scene, intr, pose, params = self.scene_setup()
        with pytest.raises(InsufficientOverlapError):
            generate_gt_pairs(params, pose, intr, trans_frac=4.0, rot_max_deg=179.0,
                              rng_seed=3, stride=2, n_samples=24)

    def test_survivors_decrease_with_threshold(self, plane_run):
        counts = []
        for thr in (8.0, 3.0, 1.0):
            try:
                pairs = generate_gt_pairs(plane_run.params, plane_run.poses[0],
                                          plane_run.intrinsics, reproj_threshold=thr,
                                          rng_seed=5, stride=2, n_samples=32,
                                          min_pairs=1)
                counts.append(len(pairs))
            except InsufficientOverlapError:
                counts.append(0)
        assert counts[0] >= counts[1] >= counts[2]
        assert counts[0] > 0

    def test_survivors_reproject_within_threshold(self, plane_run):
        """Every surviving pair's lifted point lands within the threshold of
        its 2D pixel when projected into the database camera."""
        thr = 3.0
        pairs = generate_gt_pairs(plane_run.params, plane_run.poses[1],
                                  plane_run.intrinsics, reproj_threshold=thr,
                                  rng_seed=6, stride=2, n_samples=32, min_pairs=1)
        assert len(pairs) > 0
        uv, valid = project(pairs.database_pose, plane_run.intrinsics, pairs.points_3d)
        centers = np.stack([pairs.pixels_2d[:, 1] + 0.5,
                            pairs.pixels_2d[:, 0] + 0.5], axis=1)
        assert valid.all()
        assert np.max(np.linalg.norm(uv - centers, axis=1)) <= thr


class TestPerturbPose:
    def test_magnitudes_respected(self):
        from nerfloc.geometry import Pose, pose_error
        rng = np.random.default_rng(7)
        base = Pose.identity()
        for _ in range(50):
            p = perturb_pose(base, 0.5, 5.0, rng)
            trans, rot = pose_error(p, base)
            assert trans <= 0.5 + 1e-12
            assert rot <= 5.0 + 1e-9
