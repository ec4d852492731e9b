import numpy as np
import pytest

from nightstereo.errors import EmptyScene, EmptyTrajectory, MissingDataset
from nightstereo.geometry import CalibrationSet, Pose
from nightstereo.imaging import ImageBuf, psnr, quantize
from nightstereo.maps import BUILDING, ROAD, SKY, VEHICLE
from nightstereo.scenegen import (
    BoxSpec,
    DegradeParams,
    SceneSpec,
    TrajectorySpec,
    build_scene,
    degrade_night,
    generate_sequence,
    open_dataset,
    render_stereo,
    trajectory_poses,
)

EMPTY = dict(n_vehicles=0, n_buildings=0, n_signs=0)


def wall_scene(textured=True):
    wall = BoxSpec(min=(-50.0, -30.0, 6.712), max=(50.0, 1.6, 9.0), textured=textured)
    return build_scene(SceneSpec(boxes=[wall], **EMPTY), seed=3)


class TestScene:
    def test_deterministic(self):
        assert build_scene(SceneSpec(), 11).to_json() == build_scene(SceneSpec(), 11).to_json()
        assert build_scene(SceneSpec(), 11).to_json() != build_scene(SceneSpec(), 12).to_json()

    def test_no_ground_plane(self):
        with pytest.raises(EmptyScene):
            build_scene(SceneSpec(ground_plane=False), 0)

    def test_road_and_sky_only(self, tiny_calib):
        scene = build_scene(SceneSpec(**EMPTY), 0)
        _, _, depth, labels = render_stereo(scene, tiny_calib, Pose())
        assert set(np.unique(labels.labels)) == {SKY, ROAD}
        assert not depth.valid[labels.labels == SKY].any()
        assert depth.valid[labels.labels == ROAD].all()

    def test_boxes_show_several_classes(self, tiny_calib):
        boxes = [
            BoxSpec(min=(2.0, -4.0, 10.0), max=(6.0, 1.6, 14.0)),
            BoxSpec(min=(-3.0, 0.2, 8.0), max=(-1.0, 1.6, 12.0), label="vehicle"),
            BoxSpec(min=(-9.0, -6.0, 20.0), max=(-5.0, 1.6, 24.0)),
            BoxSpec(min=(6.0, -2.0, 25.0), max=(9.0, 1.6, 28.0)),
            BoxSpec(min=(-1.0, 0.4, 30.0), max=(1.0, 1.6, 34.0), label="vehicle"),
        ]
        scene = build_scene(SceneSpec(boxes=boxes, **EMPTY), 0)
        _, _, _, labels = render_stereo(scene, tiny_calib, Pose())
        present = set(np.unique(labels.labels))
        assert len(present) >= 3
        assert {BUILDING, VEHICLE} <= present

    def test_road_depth_is_exact(self, tiny_calib):
        scene = build_scene(SceneSpec(**EMPTY), 0)
        _, _, depth, labels = render_stereo(scene, tiny_calib, Pose())
        rows = np.nonzero((labels.labels == ROAD).all(axis=1))[0]
        for row in rows:
            expected = 1.6 * tiny_calib.fy / (row - tiny_calib.cy)
            np.testing.assert_allclose(depth.values[row], expected, rtol=1e-9)


class TestStereoRender:
    calib = CalibrationSet(fx=600.0, fy=600.0, cx=299.5, cy=199.5, baseline=0.6712, width=600, height=400)

    def wall_rows(self, depth):
        return np.nonzero(np.all(np.abs(depth.values - 6.712) < 1e-9, axis=1))[0]

    def test_wall_shift_is_sixty_pixels(self):
        left, right, depth, _ = render_stereo(wall_scene(), self.calib, Pose())
        rows = self.wall_rows(depth)
        assert len(rows) > 100
        np.testing.assert_allclose(self.calib.disparity_for_depth(depth.values[rows]), 60.0, atol=1e-6)
        np.testing.assert_allclose(left.data[rows, 60:], right.data[rows, :-60], atol=1e-6)

    def test_untextured_wall_views_identical(self):
        left, right, depth, _ = render_stereo(wall_scene(textured=False), self.calib, Pose())
        rows = self.wall_rows(depth)
        np.testing.assert_array_equal(left.data[rows], right.data[rows])


class TestDegrade:
    def test_identity_preset_quantizes(self, rng):
        img = ImageBuf(rng.random((5, 6, 3)))
        out = degrade_night(img, DegradeParams.day())
        np.testing.assert_array_equal(out.data, quantize(img.data) / 255.0)

    def test_gain_and_gamma(self):
        out = degrade_night(ImageBuf(np.full((3, 3), 0.8)), DegradeParams(gain=0.25, gamma=2.0))
        np.testing.assert_allclose(out.data, 0.04, atol=1 / 510)

    def test_noise_is_seeded(self, rng):
        img = ImageBuf(rng.random((8, 8)))
        params = DegradeParams.night(5)
        np.testing.assert_array_equal(degrade_night(img, params).data, degrade_night(img, params).data)
        assert not np.array_equal(degrade_night(img, params.for_frame(0, 0)).data,
                                  degrade_night(img, params.for_frame(0, 1)).data)

    def test_night_is_far_from_day(self, tiny_dataset):
        dataset = open_dataset(tiny_dataset)
        assert psnr(dataset.image("day", "left", 0), dataset.image("night", "left", 0)) < 25.0


class TestTrajectory:
    def test_open_spacing(self):
        traj = trajectory_poses(TrajectorySpec(frames=5, step=0.5))
        steps = np.linalg.norm(np.diff(traj.positions(), axis=0), axis=1)
        np.testing.assert_allclose(steps, 0.5, atol=1e-12)

    def test_closed_loop_returns(self):
        spec = TrajectorySpec(frames=60, closed=True)
        traj = trajectory_poses(spec)
        gap = np.linalg.norm(traj.positions()[-1] - traj.positions()[0])
        assert gap < 0.01 * spec.length()

    def test_arc_turns_heading(self):
        spec = TrajectorySpec(straight=0.0, arc_radius=10.0, arc_angle_deg=90.0, step=np.pi * 10 / 2)
        traj = trajectory_poses(spec)
        assert traj.poses[-1].rotation_angle() == pytest.approx(np.pi / 2)
        np.testing.assert_allclose(traj.positions()[-1], [10.0, 0.0, 10.0], atol=1e-9)

    def test_too_few_frames(self):
        with pytest.raises(EmptyTrajectory):
            trajectory_poses(TrajectorySpec(frames=1))


class TestDataset:
    def test_two_frame_layout(self, tmp_path, tiny_calib):
        out = generate_sequence(SceneSpec(), TrajectorySpec(frames=2), tiny_calib, tmp_path / "d", seed=4)
        for condition in ("day", "night"):
            for side in ("left", "right"):
                assert len(list((out / condition / side).glob("*.ppm"))) == 2
        assert len(list((out / "gt" / "depth").glob("*.pgm"))) == 2
        assert len(list((out / "gt" / "labels").glob("*.pgm"))) == 2
        assert len((out / "gt" / "poses.txt").read_text().splitlines()) == 2

    def test_same_seed_same_tree(self, tmp_path, tiny_calib):
        spec = TrajectorySpec(frames=2)
        a = generate_sequence(SceneSpec(), spec, tiny_calib, tmp_path / "a", seed=9)
        b = generate_sequence(SceneSpec(), spec, tiny_calib, tmp_path / "b", seed=9, workers=3)
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_reader(self, tiny_dataset, tiny_calib):
        dataset = open_dataset(tiny_dataset)
        assert len(dataset) == 3
        assert dataset.calibration == tiny_calib
        assert dataset.image("night", "right", 2).shape == (64, 96, 3)
        assert dataset.gt_depth(1).shape == (64, 96)
        assert dataset.gt_labels(1).shape == (64, 96)
        assert len(dataset.poses()) == 3
        assert dataset.manifest["seed"] == 1

    def test_stored_depth_is_millimetric(self, tiny_dataset, tiny_calib):
        dataset = open_dataset(tiny_dataset)
        depth = dataset.gt_depth(0)
        road = dataset.gt_labels(0).labels == ROAD
        rows = np.nonzero(road)[0]
        expected = 1.6 * tiny_calib.fy / (rows - tiny_calib.cy)
        assert road.any()
        np.testing.assert_allclose(depth.values[road], expected, atol=0.001 + 1e-9)

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(MissingDataset):
            open_dataset(tmp_path)
