import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from nightstereo.errors import DegenerateCalibration
from nightstereo.geometry import (
    CalibrationSet,
    Pose,
    Trajectory,
    backproject,
    closest_rotation,
    load_poses,
    project,
    save_poses,
)


def test_default_calibration_matches_rig():
    calib = CalibrationSet()
    assert (calib.width, calib.height) == (600, 400)
    assert calib.baseline == pytest.approx(0.6712)


def test_disparity_for_depth():
    calib = CalibrationSet(fx=600.0)
    assert calib.disparity_for_depth(6.712) == pytest.approx(60.0)


def test_degenerate_calibration():
    with pytest.raises(DegenerateCalibration):
        CalibrationSet(baseline=0.0).check()
    with pytest.raises(DegenerateCalibration):
        CalibrationSet(fx=-1.0).check()


def test_scaled_keeps_pixel_centres():
    calib = CalibrationSet(fx=900.0, fy=900.0, cx=599.5, cy=399.5, width=1200, height=800)
    half = calib.scaled(600, 400)
    assert (half.fx, half.fy) == (450.0, 450.0)
    assert (half.cx, half.cy) == (299.5, 199.5)
    assert half.baseline == calib.baseline


def test_unknown_calibration_key_rejected():
    with pytest.raises(ValueError):
        CalibrationSet.model_validate({"fx": 1.0, "skew": 0.0})


def test_twist_exponential_matches_scipy(rng):
    for _ in range(20):
        xi = rng.normal(size=6)
        pose = Pose.from_twist(xi)
        np.testing.assert_allclose(pose.rotation, Rotation.from_rotvec(xi[:3]).as_matrix(), atol=1e-12)
        np.testing.assert_allclose(pose.rotation @ pose.rotation.T, np.eye(3), atol=1e-12)


def test_small_twist_is_first_order():
    xi = np.array([0.0, 0.0, 0.0, 1e-3, -2e-3, 5e-4])
    np.testing.assert_allclose(Pose.from_twist(xi).translation, xi[3:], atol=1e-15)


def test_compose_and_inverse(rng):
    a = Pose.from_twist(rng.normal(size=6))
    b = Pose.from_twist(rng.normal(size=6))
    points = rng.normal(size=(5, 3))
    np.testing.assert_allclose((a @ b).apply(points), a.apply(b.apply(points)), atol=1e-12)
    np.testing.assert_allclose((a @ a.inverse()).matrix(), np.eye(4), atol=1e-12)


def test_from_yaw_heads_along_x():
    pose = Pose.from_yaw(np.pi / 2)
    np.testing.assert_allclose(pose.rotation @ [0.0, 0.0, 1.0], [1.0, 0.0, 0.0], atol=1e-12)
    assert pose.rotation_angle() == pytest.approx(np.pi / 2)


def test_closest_rotation_repairs_drift(rng):
    r = Rotation.from_rotvec(rng.normal(size=3)).as_matrix()
    fixed = closest_rotation(r + 1e-4 * rng.normal(size=(3, 3)))
    np.testing.assert_allclose(fixed @ fixed.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(fixed) == pytest.approx(1.0)


def test_pose_file(tmp_path, rng):
    poses = [Pose.from_twist(rng.normal(size=6)) for _ in range(3)]
    save_poses(tmp_path / "poses.txt", Trajectory([0, 1, 2], poses))
    lines = (tmp_path / "poses.txt").read_text().splitlines()
    assert len(lines) == 3 and all(len(line.split()) == 12 for line in lines)
    back = load_poses(tmp_path / "poses.txt")
    assert back.frames == [0, 1, 2]
    np.testing.assert_allclose(back.poses[2].matrix(), poses[2].matrix(), atol=1e-11)


def test_pose_file_wrong_width(tmp_path):
    (tmp_path / "poses.txt").write_text("1 0 0 0 0 1 0 0 0 0 1\n")
    with pytest.raises(ValueError):
        load_poses(tmp_path / "poses.txt")


def test_trajectory_frames_must_increase():
    traj = Trajectory()
    traj.append(0, Pose())
    with pytest.raises(ValueError):
        traj.append(0, Pose())


def test_path_length():
    traj = Trajectory([0, 1, 2], [Pose(translation=[0, 0, z]) for z in (0.0, 3.0, 7.0)])
    assert traj.path_length() == pytest.approx(7.0)
    assert traj.pose_at(1).translation[2] == 3.0


def test_project_backproject():
    calib = CalibrationSet()
    points = np.array([[1.0, -0.5, 10.0], [-2.0, 0.3, 4.0]])
    uv = project(points, calib)
    np.testing.assert_allclose(backproject(uv, points[:, 2], calib), points, atol=1e-12)
