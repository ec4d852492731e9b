import shutil

import numpy as np
import pytest

from nightstereo.errors import ImageTooSmall, MissingWaypoint, TooFewPoints
from nightstereo.geometry import CalibrationSet, Pose, Trajectory, project
from nightstereo.imaging import ImageBuf
from nightstereo.maps import SegMap
from nightstereo.vo import (
    Keypoint,
    VoParams,
    default_waypoints,
    describe,
    dog_keypoints,
    endpoint_error,
    gauss_newton_refine,
    huber_cost,
    keypoint_delta,
    match_stereo,
    reprojection_jacobian,
    reprojection_residuals,
    run_vo,
    solve_pose_gn,
    track,
    waypoint_translation_error,
)

CALIB = CalibrationSet()
TRUE_MOTION = Pose.from_twist(np.array([0.01, -0.02, 0.005, 0.1, -0.05, 0.3]))


@pytest.fixture
def scene_points(rng):
    return np.column_stack([rng.uniform(-3, 3, 40), rng.uniform(-2, 2, 40), rng.uniform(5, 15, 40)])


def straight(n, dx=0.0):
    return Trajectory(list(range(n)), [Pose(translation=[dx, 0.0, float(k)]) for k in range(n)])


class TestKeypoints:
    def test_constant_image_has_none(self):
        assert dog_keypoints(np.full((64, 64), 0.5)) == []

    def test_blob_is_found(self):
        ys, xs = np.mgrid[0:64, 0:64]
        plane = 0.2 + 0.6 * np.exp(-((xs - 32) ** 2 + (ys - 30) ** 2) / (2 * 3.0 ** 2))
        kps = dog_keypoints(ImageBuf(plane))
        assert any(abs(kp.x - 32) <= 2 and abs(kp.y - 30) <= 2 for kp in kps)

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            dog_keypoints(np.zeros((20, 40)))

    def test_capped_and_ordered(self, make_texture):
        kps = dog_keypoints(make_texture(96, 96), VoParams(max_keypoints=5))
        assert 0 < len(kps) <= 5
        assert kps == sorted(kps, key=lambda kp: (kp.y, kp.x, kp.octave, kp.scale))

    @pytest.mark.parametrize("dy, dx", [(5, 11), (8, 3)])
    def test_translation_equivariant(self, make_texture, dy, dx):
        canvas = make_texture(176, 176)
        size, margin = 160, 44
        params = VoParams(max_keypoints=10_000)
        first = dog_keypoints(canvas[:size, :size], params)
        shifted = [kp for kp in dog_keypoints(canvas[dy:dy + size, dx:dx + size], params) if kp.octave == 0]

        def interior(x, y):
            return margin <= x <= size - 1 - margin and margin <= y <= size - 1 - margin

        expected = [kp for kp in first if kp.octave == 0 and interior(kp.x, kp.y) and interior(kp.x - dx, kp.y - dy)]
        assert expected
        for kp in expected:
            assert any(abs(s.x - (kp.x - dx)) <= 1 and abs(s.y - (kp.y - dy)) <= 1 for s in shifted), kp

    def test_delta_of_identical_images(self, make_texture):
        img = ImageBuf(make_texture(64, 64))
        report = keypoint_delta(img, img)
        assert report["delta"] == 0
        assert report["night"] == report["enhanced"]


class TestDescriptors:
    kp = Keypoint(32.0, 32.0, 0, 0, 1.0)

    def test_unit_norm_and_mean_free(self, make_texture):
        desc = describe(make_texture(64, 64), self.kp)
        assert desc.shape == (256,)
        assert np.linalg.norm(desc) == pytest.approx(1.0)
        assert desc.mean() == pytest.approx(0.0, abs=1e-12)

    def test_gain_invariant(self, make_texture):
        plane = make_texture(64, 64)
        np.testing.assert_allclose(describe(0.5 * plane + 0.1, self.kp), describe(plane, self.kp), atol=1e-9)

    def test_outside_image(self, make_texture):
        assert describe(make_texture(64, 64), Keypoint(3.0, 32.0, 0, 0, 1.0)) is None

    def test_flat_patch(self):
        assert not describe(np.full((64, 64), 0.4), self.kp).any()


class TestMatching:
    def test_stereo_disparity(self, make_texture):
        base = make_texture(60, 110)
        left, right = base[:, 10:90], base[:, 17:97]
        matches = match_stereo([Keypoint(40.0, 30.0, 0, 0, 1.0)], left, right, dmax=16)
        assert len(matches) == 1
        assert abs(matches[0].disparity - 7.0) <= 0.5

    def test_track_shift(self, make_texture):
        base = make_texture(80, 110)
        prev, nxt = base[10:70, 10:90], base[12:72, 13:93]
        tracks = track(prev, nxt, [Keypoint(40.0, 30.0, 0, 0, 1.0)])
        assert len(tracks) == 1
        assert (tracks[0].index, tracks[0].x, tracks[0].y) == (0, 37.0, 28.0)

    def test_track_skips_flat_patches(self):
        flat = np.full((60, 80), 0.3)
        assert track(flat, flat, [Keypoint(40.0, 30.0, 0, 0, 1.0)]) == []


class TestPoseSolver:
    def test_jacobian_matches_finite_differences(self, scene_points):
        pose = TRUE_MOTION
        obs = np.zeros((len(scene_points), 2))
        jac = reprojection_jacobian(pose, scene_points, CALIB)
        eps = 1e-6
        for k in range(6):
            delta = np.zeros(6)
            delta[k] = eps
            plus = reprojection_residuals(Pose.from_twist(delta) @ pose, scene_points, obs, CALIB)
            minus = reprojection_residuals(Pose.from_twist(-delta) @ pose, scene_points, obs, CALIB)
            np.testing.assert_allclose(jac[:, :, k], (plus - minus) / (2 * eps), rtol=1e-5, atol=1e-4)

    def test_recovers_motion(self, scene_points):
        obs = project(TRUE_MOTION.apply(scene_points), CALIB)
        pose = solve_pose_gn(scene_points, obs, CALIB)
        np.testing.assert_allclose(pose.matrix(), TRUE_MOTION.matrix(), atol=1e-6)

    def test_rejects_outliers(self, scene_points):
        obs = project(TRUE_MOTION.apply(scene_points), CALIB)
        obs[:3] += 40.0
        pose = solve_pose_gn(scene_points, obs, CALIB)
        np.testing.assert_allclose(pose.matrix(), TRUE_MOTION.matrix(), atol=1e-6)

    def test_cost_never_increases(self, scene_points, rng):
        obs = project(TRUE_MOTION.apply(scene_points), CALIB) + rng.normal(scale=0.5, size=(40, 2))
        costs = gauss_newton_refine(scene_points, obs, CALIB, Pose()).costs
        assert len(costs) > 1
        assert all(b <= a for a, b in zip(costs, costs[1:]))

    def test_too_few_points(self, scene_points):
        with pytest.raises(TooFewPoints):
            solve_pose_gn(scene_points[:5], np.zeros((5, 2)), CALIB)

    def test_huber_cost(self):
        assert huber_cost(np.array([1.0, 3.0]), 2.0) == pytest.approx(0.5 + 2.0 * (3.0 - 1.0))


class TestTrajectoryMetrics:
    def test_global_offset_is_aligned_away(self):
        gt = straight(21)
        shift = Pose.from_yaw(0.3) @ Pose(translation=[5.0, 1.0, -2.0])
        est = Trajectory(gt.frames, [shift @ p for p in gt.poses])
        report = waypoint_translation_error(est, gt, [10, 20])
        assert report["mean_error"] == pytest.approx(0.0, abs=1e-12)
        assert report["waypoints"] == 2

    def test_single_waypoint_off_by_one_meter(self):
        gt = straight(21)
        est = Trajectory(gt.frames, [Pose(translation=p.translation + [1.0 if f == 10 else 0.0, 0, 0])
                                     for f, p in zip(gt.frames, gt.poses)])
        report = waypoint_translation_error(est, gt, [10, 20])
        assert report["wp_000010"] == pytest.approx(1.0)
        assert report["wp_000020"] == pytest.approx(0.0)
        assert report["mean_error"] == pytest.approx(0.5)
        assert report["max_error"] == pytest.approx(1.0)

    def test_missing_waypoint(self):
        with pytest.raises(MissingWaypoint):
            waypoint_translation_error(straight(5), straight(5), [7])
        with pytest.raises(MissingWaypoint):
            waypoint_translation_error(straight(5), straight(5), [])

    def test_endpoint(self):
        gt = straight(11)
        est = Trajectory(gt.frames, gt.poses[:-1] + [Pose(translation=[0.5, 0.0, 10.0])])
        report = endpoint_error(est, gt)
        assert report["endpoint_error"] == pytest.approx(0.5)
        assert report["path_length"] == pytest.approx(10.0)
        assert report["ratio"] == pytest.approx(0.05)

    def test_default_waypoints(self):
        assert default_waypoints(35) == [10, 20, 30]
        assert default_waypoints(5) == [4]
        assert default_waypoints(0) == []


class TestRunVo:
    def test_day_sequence(self, tiny_dataset):
        traj = run_vo(tiny_dataset, "day", params=VoParams(dmax=16, max_keypoints=100))
        assert traj.frames == [0, 1, 2]
        np.testing.assert_array_equal(traj.poses[0].matrix(), np.eye(4))
        assert np.all(np.isfinite(traj.positions()))

    def test_unknown_condition(self, tiny_dataset):
        with pytest.raises(ValueError):
            run_vo(tiny_dataset, "fog")

    def test_static_sequence_stays_at_origin(self, tiny_dataset, tmp_path):
        static = tmp_path / "static"
        shutil.copytree(tiny_dataset, static)
        for side in ("left", "right"):
            first = static / "day" / side / "000000.ppm"
            for frame in (1, 2):
                shutil.copyfile(first, static / "day" / side / f"{frame:06d}.ppm")
        traj = run_vo(static, "day", params=VoParams(dmax=16, max_keypoints=100))
        assert np.abs(traj.positions()).max() < 1e-3

    def test_night_falls_back_at_least_as_often_as_day(self, tiny_dataset):
        params = VoParams(dmax=16, max_keypoints=100)
        day = run_vo(tiny_dataset, "day", params=params)
        night = run_vo(tiny_dataset, "night", params=params)
        assert night.fallback_count >= day.fallback_count

    def test_enhanced_condition_uses_segmentation_prior(self, tiny_dataset, tiny_calib, monkeypatch):
        priors = []

        def fake_enhance(img, seg, weights, params=None):
            priors.append(seg)
            return img
        monkeypatch.setattr("nightstereo.enhance.enhance", fake_enhance)
        run_vo(tiny_dataset, "enhanced", params=VoParams(dmax=16, max_keypoints=100))
        assert len(priors) == 6
        assert all(isinstance(seg, SegMap) and seg.shape == (tiny_calib.height, tiny_calib.width) for seg in priors)
