"""Camera model, rigid poses and KITTI-layout trajectory files.

Frames follow the usual camera convention: x right, y down, z forward.
A trajectory stores camera-to-world poses.
"""
import os
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial.transform import Rotation

from nightstereo.errors import DegenerateCalibration, IoFailure


class CalibrationSet(BaseModel):
    """Pinhole intrinsics of the rectified left camera plus the stereo baseline."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    fx: float = Field(default=450.0, description="focal length along x, pixels")
    fy: float = Field(default=450.0, description="focal length along y, pixels")
    cx: float = Field(default=299.5, description="principal point x, pixels")
    cy: float = Field(default=199.5, description="principal point y, pixels")
    baseline: float = Field(default=0.6712, description="stereo baseline, meters")
    width: int = Field(default=600, description="image width, pixels")
    height: int = Field(default=400, description="image height, pixels")

    def check(self) -> "CalibrationSet":
        if self.fx <= 0 or self.fy <= 0:
            raise DegenerateCalibration(f"focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if self.baseline <= 0:
            raise DegenerateCalibration(f"baseline must be positive, got {self.baseline}")
        if self.width < 1 or self.height < 1:
            raise DegenerateCalibration(f"image size {self.width}x{self.height}")
        return self

    def scaled(self, width: int, height: int) -> "CalibrationSet":
        """Intrinsics after a half-pixel-centre resize to width x height."""
        sx = width / self.width
        sy = height / self.height
        return CalibrationSet(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            baseline=self.baseline,
            width=width,
            height=height,
        )

    def disparity_for_depth(self, depth):
        return self.fx * self.baseline / np.asarray(depth, dtype=np.float64)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def closest_rotation(m: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform X' = R X + t."""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_row(cls, values: Sequence[float]) -> "Pose":
        """12 numbers, row-major 3x4 [R|t]."""
        m = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    @classmethod
    def from_twist(cls, xi: np.ndarray) -> "Pose":
        """SE(3) exponential of a twist (omega, v)."""
        xi = np.asarray(xi, dtype=np.float64)
        omega, v = xi[:3], xi[3:]
        theta = float(np.linalg.norm(omega))
        w = skew(omega)
        if theta < 1e-8:
            v_mat = np.eye(3) + 0.5 * w + w @ w / 6.0
        else:
            v_mat = (np.eye(3)
                     + (1.0 - np.cos(theta)) / theta ** 2 * w
                     + (theta - np.sin(theta)) / theta ** 3 * (w @ w))
        return cls(Rotation.from_rotvec(omega).as_matrix(), v_mat @ v)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Rotation about the camera y axis (heading in the ground plane)."""
        return cls(Rotation.from_rotvec([0.0, yaw, 0.0]).as_matrix(), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def row(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]]).reshape(12)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def orthonormalized(self) -> "Pose":
        return Pose(closest_rotation(self.rotation), self.translation)

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(Rotation.from_matrix(closest_rotation(self.rotation)).as_rotvec()))


@dataclass
class Trajectory:
    """Ordered (frame index, camera-to-world pose) list."""
    frames: List[int] = field(default_factory=list)
    poses: List[Pose] = field(default_factory=list)
    fallback_count: int = 0

    def __post_init__(self):
        if len(self.frames) != len(self.poses):
            raise ValueError("frames and poses differ in length")
        if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
            raise ValueError("trajectory frame indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def append(self, frame: int, pose: Pose) -> None:
        if self.frames and frame <= self.frames[-1]:
            raise ValueError(f"frame {frame} does not follow {self.frames[-1]}")
        self.frames.append(frame)
        self.poses.append(pose)

    def pose_at(self, frame: int) -> Pose:
        return self.poses[self.frames.index(frame)]

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.translation for p in self.poses])

    def path_length(self) -> float:
        positions = self.positions()
        if len(positions) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(positions, axis=0), axis=1).sum())


def format_pose_lines(poses: Iterable[Pose]) -> str:
    return "".join(" ".join(f"{v:.12e}" for v in pose.row()) + "\n" for pose in poses)


def save_poses(path: Union[str, os.PathLike], trajectory: Trajectory) -> None:
    """Write one pose per line as 12 numbers, row-major 3x4 [R|t]."""
    try:
        with open(path, "w") as f:
            f.write(format_pose_lines(trajectory.poses))
    except OSError as e:
        raise IoFailure(path, e.strerror) from e


def load_poses(path: Union[str, os.PathLike]) -> Trajectory:
    """Read a KITTI-odometry pose file; frame indices are line numbers."""
    try:
        with open(path) as f:
            lines = [line.split() for line in f if line.strip()]
    except OSError as e:
        raise IoFailure(path, e.strerror) from e
    poses = []
    for i, values in enumerate(lines):
        if len(values) != 12:
            raise ValueError(f"{path}:{i + 1}: expected 12 numbers, got {len(values)}")
        poses.append(Pose.from_row([float(v) for v in values]))
    return Trajectory(list(range(len(poses))), poses)


def project(points: np.ndarray, calib: CalibrationSet) -> np.ndarray:
    """Pinhole projection of camera-frame points to pixels."""
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 2]
    u = calib.fx * points[:, 0] / z + calib.cx
    v = calib.fy * points[:, 1] / z + calib.cy
    return np.stack([u, v], axis=1)


def backproject(uv: np.ndarray, depth: np.ndarray, calib: CalibrationSet) -> np.ndarray:
    """Camera-frame points at z-depth `depth` seen at pixels `uv`."""
    uv = np.asarray(uv, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    x = (uv[:, 0] - calib.cx) / calib.fx * z
    y = (uv[:, 1] - calib.cy) / calib.fy * z
    return np.stack([x, y, z], axis=1)
