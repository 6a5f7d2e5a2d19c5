import numpy as np
import pytest

from nerfloc.coarse import (arcface_loss, init_place_predictor, initial_pose,
                            load_pose_groups, predict_place, save_pose_groups,
                            train_place_predictor, two_stage_cluster)
from nerfloc.geometry import look_at
from nerfloc.synthscene import (default_intrinsics, default_scene, make_trajectory,
                                multi_site_labels, raytrace)


def unit(v):
    return np.asarray(v, dtype=np.float64) / np.linalg.norm(v)


class TestTwoStageCluster:
    def test_identical_poses_collapse(self):
        pose = look_at((5.0, 0.0, 2.0), (0.0, 0.0, 0.0))
        groups = two_stage_cluster([pose] * 7, k_spatial=3, k_orient=2, rng_seed=0)
        assert len(groups) == 1
        assert len(groups[0].member_ids) == 7

    def test_opposed_headings_split_by_orientation(self):
        """Same camera positions, half looking steeply down at the center and
        half up and away: the orientation stage separates the two cones."""
        poses = []
        for i in range(8):
            a = 2 * np.pi * i / 8
            pos = (3 * np.cos(a), 3 * np.sin(a), 6.0)
            poses.append(look_at(pos, (0.0, 0.0, 0.0)))
            poses.append(look_at(pos, (4 * np.cos(a), 4 * np.sin(a), 14.0)))
        groups = two_stage_cluster(poses, k_spatial=1, k_orient=2, rng_seed=1)
        assert len(groups) == 2
        for g in groups:
            parity = {int(i) % 2 for i in g.member_ids}
            assert len(parity) == 1

    def test_multi_site_exact_recovery(self):
        """4 sites x 2 headings: the two-stage clustering recovers all 8
        constructed groups, across seeds."""
        scene = default_scene()
        poses = make_trajectory(scene, "multi_site", 40, rng_seed=2, sites=4, headings=2)
        truth = multi_site_labels(40, sites=4, headings=2)
        for seed in (0, 1):
            groups = two_stage_cluster(poses, k_spatial=4, k_orient=2, rng_seed=seed)
            assert len(groups) == 8
            for g in groups:
                assert len(set(truth[g.member_ids].tolist())) == 1

    def test_mean_directions_unit(self):
        scene = default_scene()
        poses = make_trajectory(scene, "multi_site", 24, rng_seed=3)
        for g in two_stage_cluster(poses, 4, 2, rng_seed=4):
            assert abs(np.linalg.norm(g.mean_direction) - 1.0) < 1e-9

    def test_deterministic_and_stable_ids(self):
        scene = default_scene()
        poses = make_trajectory(scene, "ring", 20, rng_seed=5)
        a = two_stage_cluster(poses, 4, 2, rng_seed=6)
        b = two_stage_cluster(poses, 4, 2, rng_seed=6)
        assert [tuple(g.member_ids) for g in a] == [tuple(g.member_ids) for g in b]

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            two_stage_cluster([], 2, 2)


class TestInitialPose:
    def test_single_member_group(self):
        pose = look_at((3.0, 1.0, 2.0), (0.0, 0.0, 0.0))
        groups = two_stage_cluster([pose], 1, 1, rng_seed=0)
        assert initial_pose(groups[0]) is groups[0].representative
        np.testing.assert_array_equal(initial_pose(groups[0]).flat(), pose.flat())

    def test_representative_minimizes_combined_distance(self):
        scene = default_scene()
        poses = make_trajectory(scene, "ring", 24, rng_seed=7)
        trans = np.stack([p.translation for p in poses])
        scale = float(np.max(trans.max(axis=0) - trans.min(axis=0)))
        for g in two_stage_cluster(poses, 3, 1, rng_seed=8):
            dirs = np.stack([poses[i].forward() for i in g.member_ids])
            t = np.stack([poses[i].translation for i in g.member_ids])
            combined = (np.linalg.norm(t - g.centroid, axis=1) / scale
                        + np.arccos(np.clip(dirs @ g.mean_direction, -1, 1)))
            assert g.representative_id == g.member_ids[np.argmin(combined)]


class TestArcfaceLoss:
    def embeddings(self, rng, c=5, d=8):
        e = rng.normal(size=(c, d))
        return e / np.linalg.norm(e, axis=1, keepdims=True)

    def test_zero_margin_equals_cosine_softmax(self):
        """With m = 0 the loss is exactly scaled-softmax cross-entropy on
        cosines."""
        rng = np.random.default_rng(0)
        emb = self.embeddings(rng)
        f = unit(rng.normal(size=8))
        for label in range(5):
            loss, _, _ = arcface_loss(emb, f, label, margin=0.0, scale=16.0)
            z = 16.0 * np.clip(emb @ f, -1 + 1e-12, 1 - 1e-12)
            expected = -(z[label] - np.log(np.sum(np.exp(z - z.max()))) - z.max())
            assert abs(loss - expected) <= 1e-12

    def test_aligned_feature_keeps_positive_margin_loss(self):
        """A perfectly aligned feature still pays a margin-controlled floor
        (scale kept small enough that the floor is representable)."""
        rng = np.random.default_rng(1)
        emb = self.embeddings(rng)
        f = emb[2].copy()
        loss_m, _, _ = arcface_loss(emb, f, 2, margin=0.3, scale=4.0)
        loss_0, _, _ = arcface_loss(emb, f, 2, margin=0.0, scale=4.0)
        assert loss_m > loss_0
        assert loss_m > 0.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        emb = self.embeddings(rng, c=4, d=6)
        f = unit(rng.normal(size=6))
        label = 1
        h = 1e-6
        loss, d_f, d_emb = arcface_loss(emb, f, label, margin=0.2, scale=16.0)

        def at(feature, embeddings):
            return arcface_loss(embeddings, feature, label, 0.2, 16.0)[0]

        for i in range(6):
            up, dn = f.copy(), f.copy()
            up[i] += h
            dn[i] -= h
            num = (at(up, emb) - at(dn, emb)) / (2 * h)
            assert abs(num - d_f[i]) <= 1e-4 * max(abs(num), 1e-8)
        for j in range(4):
            for i in range(6):
                up, dn = emb.copy(), emb.copy()
                up[j, i] += h
                dn[j, i] -= h
                num = (at(f, up) - at(f, dn)) / (2 * h)
                if abs(d_emb[j, i]) >= 1e-8:
                    assert abs(num - d_emb[j, i]) <= 1e-4 * abs(d_emb[j, i])

    def test_non_unit_inputs_rejected(self):
        rng = np.random.default_rng(3)
        emb = self.embeddings(rng)
        with pytest.raises(ValueError):
            arcface_loss(emb, rng.normal(size=8) * 3.0, 0, 0.2, 16.0)
        with pytest.raises(ValueError):
            arcface_loss(emb * 2.0, unit(rng.normal(size=8)), 0, 0.2, 16.0)


class TestPlacePredictor:
    def test_untrained_prediction_rejected(self):
        pred = init_place_predictor(4, image_size=16)
        with pytest.raises(ValueError):
            predict_place(pred, np.zeros((16, 16, 3)))

    def test_training_separates_sites(self):
        """A small classifier learns to map multi-site renders to their own
        pose group with confidence above 0.5."""
        scene = default_scene()
        intr = default_intrinsics(32)
        poses = make_trajectory(scene, "multi_site", 24, rng_seed=4, sites=4, headings=2)
        groups = two_stage_cluster(poses, 4, 2, rng_seed=0)
        labels = np.empty(24, dtype=np.int64)
        for g in groups:
            labels[g.member_ids] = g.group_id
        images = np.stack([raytrace(scene, p, intr).rgb for p in poses])
        pred = init_place_predictor(len(groups), image_size=32, rng_seed=0)
        pred = train_place_predictor(pred, images, labels, epochs=60, batch=8,
                                     lr=3e-3, seed=0)
        correct = 0
        confident = 0
        for img, label in zip(images, labels):
            g, conf = predict_place(pred, img)
            correct += int(g == label)
            confident += int(conf > 0.5)
        assert correct == 24
        assert confident == 24
        emb = pred.arrays["embeddings"]
        np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-9)

    def test_prediction_faster_than_feature_render(self):
        """Coarse place prediction must undercut a single feature-map render
        at matching resolution; that headroom is the point of classifying
        instead of rendering for the initial pose."""
        import time
        from nerfloc.field import FieldConfig, init_field
        from nerfloc.renderer import render_map
        scene = default_scene()
        intr = default_intrinsics(64)
        pred = init_place_predictor(8, image_size=64, rng_seed=0)
        pred.trained = True  # timing only; weights are irrelevant
        image = np.zeros((64, 64, 3))
        params = init_field(FieldConfig(), scene.bounds, rng_seed=0)
        pose = make_trajectory(scene, "ring", 1)[0]
        predict_place(pred, image)
        render_map(params, pose, intr, stride=1, n_samples=64, compute_color=False)
        t0 = time.perf_counter()
        predict_place(pred, image)
        t_predict = time.perf_counter() - t0
        t0 = time.perf_counter()
        render_map(params, pose, intr, stride=1, n_samples=64, compute_color=False)
        t_render = time.perf_counter() - t0
        assert t_predict < t_render

    def test_prediction_deterministic(self):
        scene = default_scene()
        intr = default_intrinsics(16)
        poses = make_trajectory(scene, "ring", 8)
        images = np.stack([raytrace(scene, p, intr).rgb for p in poses])
        labels = np.arange(8) // 4
        pred = init_place_predictor(2, image_size=16, rng_seed=1)
        pred = train_place_predictor(pred, images, labels, epochs=10, seed=1)
        a = predict_place(pred, images[0])
        b = predict_place(pred, images[0])
        assert a == b
        assert 0.0 < a[1] < 1.0


class TestPoseGroupIO:
    def test_roundtrip_bitwise(self, tmp_path):
        scene = default_scene()
        poses = make_trajectory(scene, "ring", 10, rng_seed=9)
        groups = two_stage_cluster(poses, 3, 1, rng_seed=10)
        save_pose_groups(groups, tmp_path / "groups.json")
        loaded = load_pose_groups(tmp_path / "groups.json")
        save_pose_groups(loaded, tmp_path / "groups2.json")
        assert (tmp_path / "groups.json").read_bytes() == \
            (tmp_path / "groups2.json").read_bytes()
        for a, b in zip(loaded, groups):
            np.testing.assert_array_equal(a.representative.flat(), b.representative.flat())
            np.testing.assert_array_equal(a.member_ids, b.member_ids)
