import numpy as np
import pytest

from nerfloc.geometry import (Intrinsics, Pose,clip_to_box, compose, generate_rays,
                              look_at, midpoint_samples, pose_error, project,
                              ray_grid, rotation_about_axis, stratified_samples)


def rand_pose(rng):
    axis = rng.normal(size=3)
    angle = rng.uniform(0, np.pi)
    return Pose(rotation_about_axis(axis, angle), rng.uniform(-5, 5, size=3))


class TestPose:
    def test_identity_compose(self):
        rng = np.random.default_rng(0)
        p = rand_pose(rng)
        q = compose(Pose.identity(), p)
        np.testing.assert_allclose(q.rotation, p.rotation, atol=1e-12)
        np.testing.assert_allclose(q.translation, p.translation, atol=1e-12)

    def test_inverse_compose_is_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = rand_pose(rng)
            q = compose(p.inverse(), p)
            np.testing.assert_allclose(q.rotation, np.eye(3), atol=1e-9)
            np.testing.assert_allclose(q.translation, 0.0, atol=1e-9)

    def test_compose_quarter_turns(self):
        """Two 90-degree z-rotations give the hand-computed 180-degree matrix."""
        rz90 = Pose(np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
                    np.zeros(3))
        out = compose(rz90, rz90)
        expected = np.array([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(out.rotation, expected, atol=1e-12)

    def test_orthonormality_invariant(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            p = rand_pose(rng)
            np.testing.assert_allclose(p.rotation.T @ p.rotation, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(p.rotation) - 1.0) < 1e-9

    def test_invalid_rotation_rejected(self):
        with pytest.raises(ValueError):
            Pose(np.eye(3) * 2.0, np.zeros(3))

    def test_flat_roundtrip(self):
        p = rand_pose(np.random.default_rng(3))
        q = Pose.from_flat(p.flat())
        np.testing.assert_array_equal(q.rotation, p.rotation)
        np.testing.assert_array_equal(q.translation, p.translation)


class TestPoseError:
    def test_identical(self):
        p = rand_pose(np.random.default_rng(4))
        assert pose_error(p, p) == (0.0, 0.0)

    def test_translation_345(self):
        p = Pose.identity()
        q = Pose(np.eye(3), np.array([3.0, 4.0, 0.0]))
        trans, rot = pose_error(p, q)
        assert trans == pytest.approx(5.0, abs=1e-12)
        assert rot == pytest.approx(0.0, abs=1e-9)

    def test_rotation_ten_degrees(self):
        """Rotation error recovers the constructed angle via the trace formula."""
        p = Pose.identity()
        q = Pose(rotation_about_axis((1, 0, 0), np.radians(10.0)), np.zeros(3))
        trans, rot = pose_error(p, q)
        assert trans == 0.0
        assert rot == pytest.approx(10.0, abs=1e-9)

    def test_rotational_symmetry(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a, b = rand_pose(rng), rand_pose(rng)
            assert pose_error(a, b)[1] == pose_error(b, a)[1]


class TestRays:
    intr = Intrinsics(fx=2.0, fy=2.0, cx=4.5, cy=4.5, width=9, height=9)

    def test_principal_pixel_looks_down_minus_z(self):
        rays = generate_rays(Pose.identity(), self.intr, pixel_subset=[(4, 4)])
        np.testing.assert_allclose(rays[0].direction, [0.0, 0.0, -1.0], atol=1e-12)

    def test_off_axis_pixel(self):
        """Pixel one focal length right of center: direction along (1, 0, -1)."""
        rays = generate_rays(Pose.identity(), self.intr, pixel_subset=[(4, 6)])
        expected = np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)
        np.testing.assert_allclose(rays[0].direction, expected, atol=1e-12)

    def test_origin_is_camera_center(self):
        p = Pose(np.eye(3), np.array([1.0, 2.0, 3.0]))
        rays = generate_rays(p, self.intr, pixel_subset=[(4, 6)])
        np.testing.assert_array_equal(rays[0].origin, p.translation)

    def test_all_directions_unit(self):
        rng = np.random.default_rng(6)
        p = rand_pose(rng)
        rays = generate_rays(p, self.intr)
        norms = [np.linalg.norm(r.direction) for r in rays]
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)

    def test_out_of_bounds_pixel(self):
        with pytest.raises(IndexError):
            generate_rays(Pose.identity(), self.intr, pixel_subset=[(9, 0)])

    def test_projection_roundtrip(self):
        """Projecting the 3D point at depth u along a pixel's ray recovers the
        pixel center to within 1e-6 px."""
        rng = np.random.default_rng(7)
        for _ in range(10):
            pose = rand_pose(rng)
            origins, dirs, pixels = ray_grid(pose, self.intr, stride=2)
            depths = rng.uniform(0.5, 20.0, size=len(dirs))
            points = origins + depths[:, None] * dirs
            uv, valid = project(pose, self.intr, points)
            assert valid.all()
            centers = np.stack([pixels[:, 1] + 0.5, pixels[:, 0] + 0.5], axis=1)
            assert np.max(np.linalg.norm(uv - centers, axis=1)) < 1e-6


class TestSampling:
    def rays(self):
        return generate_rays(Pose.identity(),
                             Intrinsics(4.0, 4.0, 2.0, 2.0, 4, 4),
                             pixel_subset=[(0, 0), (1, 3), (3, 2)],
                             t_near=0.0, t_far=1.0)

    def test_deterministic_given_seed(self):
        a = stratified_samples(self.rays(), 8, rng_seed=11)
        b = stratified_samples(self.rays(), 8, rng_seed=11)
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.t_start, b.t_start)

    def test_each_sample_in_own_bin(self):
        batch = stratified_samples(self.rays(), 4, rng_seed=12)
        centers = 0.5 * (batch.t_start + batch.t_end)
        bins = np.floor(centers * 4.0).astype(int)
        np.testing.assert_array_equal(batch.per_ray(bins), [[0, 1, 2, 3]] * 3)

    def test_positions_on_ray(self):
        rays = self.rays()
        batch = stratified_samples(rays, 6, rng_seed=13)
        centers = 0.5 * (batch.t_start + batch.t_end)
        for k in range(len(batch.positions)):
            ray = rays[batch.ray_index[k]]
            expected = ray.origin + centers[k] * ray.direction
            np.testing.assert_allclose(batch.positions[k], expected, atol=1e-9)

    def test_t_strictly_increasing(self):
        batch = stratified_samples(self.rays(), 16, rng_seed=14)
        starts = batch.per_ray(batch.t_start)
        assert np.all(np.diff(starts, axis=1) > 0)

    def test_midpoint_sampler_covers_bins_exactly(self):
        batch = midpoint_samples(self.rays(), 4)
        np.testing.assert_allclose(batch.per_ray(batch.t_start)[0],
                                   [0.0, 0.25, 0.5, 0.75], atol=1e-12)
        np.testing.assert_allclose(batch.per_ray(batch.t_end)[0],
                                   [0.25, 0.5, 0.75, 1.0], atol=1e-12)


class TestClipToBox:
    def test_ray_through_box(self):
        bounds = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
        origins = np.array([[0.0, 0.0, 5.0]])
        dirs = np.array([[0.0, 0.0, -1.0]])
        t0, t1, hit = clip_to_box(origins, dirs, bounds)
        assert hit[0]
        assert t0[0] == pytest.approx(4.0)
        assert t1[0] == pytest.approx(6.0)

    def test_ray_missing_box(self):
        bounds = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
        t0, t1, hit = clip_to_box(np.array([[0.0, 5.0, 5.0]]),
                                  np.array([[0.0, 0.0, -1.0]]), bounds)
        assert not hit[0]


class TestLookAt:
    def test_forward_points_at_target(self):
        p = look_at((5.0, 2.0, 3.0), (0.0, 0.0, 0.0))
        expected = -np.array([5.0, 2.0, 3.0]) / np.linalg.norm([5.0, 2.0, 3.0])
        np.testing.assert_allclose(p.forward(), expected, atol=1e-12)

    def test_straight_down_fallback(self):
        p = look_at((0.0, 0.0, 5.0), (0.0, 0.0, 0.0))
        np.testing.assert_allclose(p.forward(), [0.0, 0.0, -1.0], atol=1e-12)
