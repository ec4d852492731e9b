"""Synthetic stereo sequences with exact ground truth.

A scene is a road plane, axis-aligned boxes (vehicles, buildings) and vertical
quads (signs) under a sky gradient, all textured with seeded value noise. The
camera drives along a straight segment followed by an arc (or a closed
stadium loop). The right view is rendered from the pose shifted by the
baseline along the camera x axis, so every pair is rectified by construction.

Randomness comes from numpy's PCG64 generator (`numpy.random.default_rng`);
every seed is recorded in the dataset manifest.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from nightstereo.errors import EmptyScene, EmptyTrajectory, IoFailure, MissingDataset
from nightstereo.geometry import CalibrationSet, Pose, Trajectory, format_pose_lines, load_poses
from nightstereo.imaging import ImageBuf, load_pnm, quantize, save_pnm
from nightstereo.maps import (
    BUILDING,
    CLASS_NAMES,
    INVALID,
    ROAD,
    SIGN,
    SKY,
    VEHICLE,
    DepthMap,
    SegMap,
    load_depth_pgm,
    load_labels_pgm,
    save_depth_pgm,
    save_labels_pgm,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
DEPTH_SCALE = 0.002  # meters per 16-bit depth code
CONDITIONS = ("day", "night")
SIDES = ("left", "right")

_LATTICE = 64
_OCTAVES = ((0.8, 0.35), (0.2, 0.35), (0.05, 0.30))  # (cell size m, amplitude)
_LIGHT = np.array([-0.4, -1.0, -0.3]) / np.linalg.norm([-0.4, -1.0, -0.3])
_EPS = 1e-6


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------

class BoxSpec(BaseModel):
    """Explicitly placed box, world coordinates (y down)."""
    model_config = ConfigDict(extra="forbid")

    min: Tuple[float, float, float]
    max: Tuple[float, float, float]
    label: Literal["vehicle", "building"] = "building"
    color: Tuple[float, float, float] = (0.7, 0.65, 0.6)
    textured: bool = True


class SceneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_vehicles: int = Field(default=4, ge=0)
    n_buildings: int = Field(default=6, ge=0)
    n_signs: int = Field(default=2, ge=0)
    x_range: Tuple[float, float] = (-20.0, 20.0)
    z_range: Tuple[float, float] = (4.0, 60.0)
    clearance: float = Field(default=3.0, ge=0.0, description="min distance from the driven path, m")
    ground_plane: bool = True
    ground_height: float = Field(default=1.6, description="camera height above the road, m")
    far_clip: float = Field(default=120.0, gt=0.0)
    boxes: List[BoxSpec] = Field(default_factory=list)


class TrajectorySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    frames: Optional[int] = Field(default=None, description="defaults to the path length / step")
    step: float = Field(default=0.5, gt=0.0, description="meters between frames")
    straight: float = Field(default=20.0, ge=0.0)
    arc_radius: float = Field(default=15.0, gt=0.0)
    arc_angle_deg: float = Field(default=90.0)
    closed: bool = False

    def length(self) -> float:
        if self.closed:
            return 2.0 * self.straight + 2.0 * math.pi * self.arc_radius
        return self.straight + self.arc_radius * abs(math.radians(self.arc_angle_deg))


class DegradeParams(BaseModel):
    """Exposure/noise model: out = clip((g x)^gamma + n), var(n) = read^2 + shot * g x."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    gain: float = Field(default=1.0, gt=0.0, le=1.0)
    gamma: float = Field(default=1.0, ge=1.0)
    read_noise: float = Field(default=0.0, ge=0.0)
    shot_noise: float = Field(default=0.0, ge=0.0)
    seed: int = 0

    @classmethod
    def day(cls, seed: int = 0) -> "DegradeParams":
        return cls(seed=seed)

    @classmethod
    def dusk(cls, seed: int = 0) -> "DegradeParams":
        return cls(gain=0.6, gamma=1.15, read_noise=0.006, shot_noise=0.002, seed=seed)

    @classmethod
    def night(cls, seed: int = 0) -> "DegradeParams":
        return cls(gain=0.3, gamma=1.4, read_noise=0.01, shot_noise=0.004, seed=seed)

    def for_frame(self, frame: int, side: int) -> "DegradeParams":
        state = np.random.SeedSequence([self.seed, frame, side]).generate_state(1)[0]
        return self.model_copy(update={"seed": int(state)})


# ---------------------------------------------------------------------------
# scene model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Surface:
    kind: str  # "plane", "box" or "quad"
    class_id: int
    color: Tuple[float, float, float]
    texture_seed: int
    textured: bool = True
    # plane: y = lo[1]; box: lo/hi corners; quad: plane axis, offset, extent
    lo: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    hi: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis: int = 2


@dataclass(frozen=True)
class SceneModel:
    surfaces: Tuple[Surface, ...]
    far_clip: float
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _footprint_distance(corridor: np.ndarray, lo, hi) -> float:
    dx = np.maximum(np.maximum(lo[0] - corridor[:, 0], 0.0), corridor[:, 0] - hi[0])
    dz = np.maximum(np.maximum(lo[2] - corridor[:, 2], 0.0), corridor[:, 2] - hi[2])
    return float(np.min(np.hypot(dx, dz)))


def build_scene(spec: SceneSpec, seed: int, corridor: Optional[np.ndarray] = None) -> SceneModel:
    """Place the scene's objects deterministically from (spec, seed).

    `corridor` holds camera positions; objects closer than `spec.clearance`
    to any of them are re-drawn.
    """
    if not spec.ground_plane:
        raise EmptyScene("scene spec has no ground plane")
    rng = np.random.default_rng(seed)
    h = spec.ground_height
    surfaces = [Surface("plane", ROAD, (0.42, 0.42, 0.45), int(rng.integers(2 ** 31)),
                        lo=(0.0, h, 0.0), hi=(0.0, h, 0.0))]

    for box in spec.boxes:
        class_id = VEHICLE if box.label == "vehicle" else BUILDING
        surfaces.append(Surface("box", class_id, tuple(box.color), int(rng.integers(2 ** 31)),
                                textured=box.textured, lo=tuple(box.min), hi=tuple(box.max)))

    def place(size_x, size_y, size_z):
        for _ in range(100):
            x = rng.uniform(*spec.x_range)
            z = rng.uniform(*spec.z_range)
            lo = (x - size_x / 2, h - size_y, z - size_z / 2)
            hi = (x + size_x / 2, h, z + size_z / 2)
            if corridor is None or _footprint_distance(corridor, lo, hi) >= spec.clearance:
                return lo, hi
        return None

    for _ in range(spec.n_vehicles):
        width, height, length = rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.7), rng.uniform(3.8, 4.8)
        if rng.random() < 0.5:
            width, length = length, width
        color = tuple(float(c) for c in rng.uniform(0.15, 0.9, 3))
        seed_ = int(rng.integers(2 ** 31))
        placed = place(width, height, length)
        if placed:
            surfaces.append(Surface("box", VEHICLE, color, seed_, lo=placed[0], hi=placed[1]))

    for _ in range(spec.n_buildings):
        width, height, length = rng.uniform(4.0, 12.0), rng.uniform(5.0, 15.0), rng.uniform(4.0, 12.0)
        tone = rng.uniform(0.5, 0.85)
        color = (float(tone), float(tone * 0.9), float(tone * 0.8))
        seed_ = int(rng.integers(2 ** 31))
        placed = place(width, height, length)
        if placed:
            surfaces.append(Surface("box", BUILDING, color, seed_, lo=placed[0], hi=placed[1]))

    for _ in range(spec.n_signs):
        axis = 2 if rng.random() < 0.5 else 0
        color = ((0.9, 0.85, 0.15), (0.85, 0.2, 0.15), (0.2, 0.35, 0.85))[int(rng.integers(3))]
        seed_ = int(rng.integers(2 ** 31))
        placed = place(0.9, 3.0, 0.9)
        if placed:
            lo, hi = placed
            cx, cz = (lo[0] + hi[0]) / 2, (lo[2] + hi[2]) / 2
            y1 = h - 2.0
            surfaces.append(Surface("quad", SIGN, color, seed_, axis=axis,
                                    lo=(cx - 0.45, y1 - 0.9, cz - 0.45),
                                    hi=(cx + 0.45, y1, cz + 0.45)))

    placed_objects = len(surfaces) - 1 - len(spec.boxes)
    wanted = spec.n_vehicles + spec.n_buildings + spec.n_signs
    if placed_objects < wanted:
        logger.debug("placed %d of %d random objects", placed_objects, wanted)
    return SceneModel(tuple(surfaces), spec.far_clip, seed)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

@lru_cache(maxsize=256)
def _lattice(seed: int, octave: int) -> np.ndarray:
    grid = np.random.default_rng([seed, octave]).random((_LATTICE, _LATTICE))
    grid.flags.writeable = False
    return grid


def _value_noise(grid: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    iu = np.floor(u)
    iv = np.floor(v)
    fu = u - iu
    fv = v - iv
    fu = fu * fu * (3.0 - 2.0 * fu)
    fv = fv * fv * (3.0 - 2.0 * fv)
    i0 = iu.astype(np.int64) % _LATTICE
    j0 = iv.astype(np.int64) % _LATTICE
    i1 = (i0 + 1) % _LATTICE
    j1 = (j0 + 1) % _LATTICE
    top = grid[j0, i0] * (1 - fu) + grid[j0, i1] * fu
    bottom = grid[j1, i0] * (1 - fu) + grid[j1, i1] * fu
    return top * (1 - fv) + bottom * fv


def texture(seed: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Multi-octave value noise in [0, 1] over surface coordinates in meters."""
    out = np.zeros_like(u)
    for octave, (cell, amplitude) in enumerate(_OCTAVES):
        out += amplitude * _value_noise(_lattice(seed, octave), u / cell, v / cell)
    return out


def _sky(dirs: np.ndarray) -> np.ndarray:
    elevation = -dirs[..., 1] / np.linalg.norm(dirs, axis=-1)
    t = np.clip(elevation * 2.0, 0.0, 1.0)[..., None]
    horizon = np.array([0.75, 0.8, 0.9])
    zenith = np.array([0.35, 0.5, 0.85])
    return horizon * (1 - t) + zenith * t


def _intersect(surface: Surface, origin: np.ndarray, dirs: np.ndarray):
    """Ray parameter (camera z-depth) of the first hit, inf on miss, plus the hit axis."""
    shape = dirs.shape[:2]
    axis = np.full(shape, 1 if surface.kind == "plane" else surface.axis, dtype=np.int8)
    if surface.kind == "plane":
        dy = dirs[..., 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (surface.lo[1] - origin[1]) / dy
        s = np.where((dy > 1e-12) & (s > _EPS), s, np.inf)
        return s, axis

    lo = np.asarray(surface.lo)
    hi = np.asarray(surface.hi)
    if surface.kind == "quad":
        a = surface.axis
        b = 0 if a == 2 else 2
        da = dirs[..., a]
        offset = (lo[a] + hi[a]) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (offset - origin[a]) / da
        hit_b = origin[b] + s * dirs[..., b]
        hit_y = origin[1] + s * dirs[..., 1]
        ok = (np.abs(da) > 1e-12) & (s > _EPS) & (hit_b >= lo[b]) & (hit_b <= hi[b]) \
            & (hit_y >= lo[1]) & (hit_y <= hi[1])
        return np.where(ok, s, np.inf), axis

    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    inv = 1.0 / safe
    t1 = (lo - origin) * inv
    t2 = (hi - origin) * inv
    t_near = np.minimum(t1, t2)
    t_far = np.maximum(t1, t2)
    enter = t_near.max(axis=-1)
    leave = t_far.min(axis=-1)
    ok = (enter <= leave) & (enter > _EPS)
    return np.where(ok, enter, np.inf), np.argmax(t_near, axis=-1).astype(np.int8)


def render_view(scene: SceneModel, calib: CalibrationSet, cam_to_world: Pose):
    """Ray-cast one view; returns (rgb HxWx3, z-depth with INVALID sky, labels)."""
    calib.check()
    us = (np.arange(calib.width) - calib.cx) / calib.fx
    vs = (np.arange(calib.height) - calib.cy) / calib.fy
    grid_u, grid_v = np.meshgrid(us, vs)
    dirs_cam = np.stack([grid_u, grid_v, np.ones_like(grid_u)], axis=-1)
    dirs = dirs_cam @ cam_to_world.rotation.T
    origin = cam_to_world.translation

    best = np.full(grid_u.shape, np.inf)
    owner = np.full(grid_u.shape, -1, dtype=np.int32)
    hit_axis = np.zeros(grid_u.shape, dtype=np.int8)
    for index, surface in enumerate(scene.surfaces):
        s, axis = _intersect(surface, origin, dirs)
        closer = s < best
        best = np.where(closer, s, best)
        owner = np.where(closer, index, owner)
        hit_axis = np.where(closer, axis, hit_axis)
    owner = np.where(best <= scene.far_clip, owner, -1)

    rgb = _sky(dirs)
    labels = np.full(grid_u.shape, SKY, dtype=np.uint8)
    depth = np.full(grid_u.shape, INVALID)
    points = origin + np.where(np.isfinite(best), best, 0.0)[..., None] * dirs
    for index, surface in enumerate(scene.surfaces):
        mask = owner == index
        if not mask.any():
            continue
        p = points[mask]
        axis = hit_axis[mask]
        d = dirs[mask]
        if surface.kind == "plane":
            u, v = p[:, 0], p[:, 2]
        else:
            # in-plane coordinates of the face that was hit
            u = np.where(axis == 0, p[:, 2], p[:, 0])
            v = np.where(axis == 1, p[:, 2], p[:, 1])
        normal = np.zeros_like(p)
        rows = np.arange(len(p))
        normal[rows, axis] = -np.sign(d[rows, axis])
        shade = 0.35 + 0.65 * np.clip(normal @ _LIGHT, 0.0, None)
        albedo = np.asarray(surface.color)[None, :]
        if surface.textured:
            albedo = albedo * (0.45 + 0.55 * texture(surface.texture_seed, u, v))[:, None]
        rgb[mask] = albedo * shade[:, None]
        labels[mask] = surface.class_id
        depth[mask] = best[mask]
    return np.clip(rgb, 0.0, 1.0), depth, labels


def render_stereo(scene: SceneModel, calib: CalibrationSet, pose: Pose):
    """Render a rectified pair plus left-camera ground truth.

    The right camera sits `baseline` meters along the left camera's +x axis,
    so a point at depth Z appears fx*B/Z pixels further left in the right view.
    """
    calib.check()
    right_pose = pose @ Pose(np.eye(3), [calib.baseline, 0.0, 0.0])
    left_rgb, depth, labels = render_view(scene, calib, pose)
    right_rgb, _, _ = render_view(scene, calib, right_pose)
    return ImageBuf(left_rgb), ImageBuf(right_rgb), DepthMap(depth), SegMap(labels)


def degrade_night(img: ImageBuf, params: DegradeParams) -> ImageBuf:
    """Apply the gain/gamma/noise exposure model and quantize to 8 bit."""
    exposed = params.gain * img.data
    out = exposed ** params.gamma
    if params.read_noise > 0 or params.shot_noise > 0:
        rng = np.random.default_rng(params.seed)
        variance = params.read_noise ** 2 + params.shot_noise * exposed
        out = out + rng.standard_normal(out.shape) * np.sqrt(variance)
    return ImageBuf(quantize(np.clip(out, 0.0, 1.0), 8) / 255.0)


# ---------------------------------------------------------------------------
# trajectories and datasets
# ---------------------------------------------------------------------------

def _segments(spec: TrajectorySpec):
    curvature = 1.0 / spec.arc_radius
    if spec.closed:
        half_turn = math.pi * spec.arc_radius
        return [(spec.straight, 0.0), (half_turn, curvature), (spec.straight, 0.0), (half_turn, curvature)]
    sign = 1.0 if spec.arc_angle_deg >= 0 else -1.0
    return [(spec.straight, 0.0), (spec.arc_radius * abs(math.radians(spec.arc_angle_deg)), sign * curvature)]


def pose_at_distance(spec: TrajectorySpec, distance: float) -> Pose:
    """Camera-to-world pose after driving `distance` meters along the path."""
    x = z = heading = 0.0
    remaining = distance
    segments = _segments(spec)
    for i, (length, curvature) in enumerate(segments):
        ds = remaining if i == len(segments) - 1 else min(remaining, length)
        if curvature == 0.0:
            x += ds * math.sin(heading)
            z += ds * math.cos(heading)
        else:
            new_heading = heading + curvature * ds
            x += (math.cos(heading) - math.cos(new_heading)) / curvature
            z += (math.sin(new_heading) - math.sin(heading)) / curvature
            heading = new_heading
        remaining -= ds
        if remaining <= 0.0:
            break
    return Pose.from_yaw(heading, (x, 0.0, z))


def trajectory_poses(spec: TrajectorySpec) -> Trajectory:
    length = spec.length()
    frames = spec.frames if spec.frames is not None else int(math.floor(length / spec.step + 1e-9)) + 1
    if frames < 2:
        raise EmptyTrajectory(f"trajectory needs at least 2 frames, got {frames}")
    if spec.closed:
        distances = np.linspace(0.0, length, frames)
    else:
        distances = np.arange(frames) * spec.step
    return Trajectory(list(range(frames)), [pose_at_distance(spec, float(d)) for d in distances])


def _frame_name(index: int, ext: str) -> str:
    return f"{index:06d}.{ext}"


def _render_frame(scene, calib, pose, frame, day, night):
    left, right, depth, labels = render_stereo(scene, calib, pose)
    images = {}
    for side_index, (side, img) in enumerate(zip(SIDES, (left, right))):
        images[("day", side)] = degrade_night(img, day.for_frame(frame, side_index))
        images[("night", side)] = degrade_night(img, night.for_frame(frame, side_index))
    return images, depth, labels


def generate_sequence(
    scene_spec: SceneSpec,
    trajectory_spec: TrajectorySpec,
    calib: CalibrationSet,
    out_dir,
    seed: int = 0,
    day: Optional[DegradeParams] = None,
    night: Optional[DegradeParams] = None,
    workers: int = 1,
) -> Path:
    """Render a full dataset directory and return its path."""
    calib.check()
    day = day or DegradeParams.day(seed)
    night = night or DegradeParams.night(seed)
    trajectory = trajectory_poses(trajectory_spec)
    scene = build_scene(scene_spec, seed, corridor=trajectory.positions())

    out = Path(out_dir)
    subdirs = [out / c / s for c in CONDITIONS for s in SIDES] + [out / "gt" / "depth", out / "gt" / "labels"]
    try:
        for d in subdirs:
            d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(out, e.strerror) from e

    def job(frame):
        return _render_frame(scene, calib, trajectory.poses[frame], frame, day, night)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        # map keeps frame order; the loop below is the single writer
        for frame, (images, depth, labels) in zip(trajectory.frames, pool.map(job, trajectory.frames)):
            for (condition, side), img in images.items():
                save_pnm(img, out / condition / side / _frame_name(frame, "ppm"))
            save_depth_pgm(out / "gt" / "depth" / _frame_name(frame, "pgm"), depth, DEPTH_SCALE)
            save_labels_pgm(out / "gt" / "labels" / _frame_name(frame, "pgm"), labels)
            logger.debug("frame %d written", frame)

    try:
        (out / "gt" / "poses.txt").write_text(format_pose_lines(trajectory.poses))
        manifest = {
            "seed": seed,
            "frames": len(trajectory),
            "depth_scale": DEPTH_SCALE,
            "classes": list(CLASS_NAMES),
            "calibration": calib.model_dump(),
            "scene": scene_spec.model_dump(mode="json"),
            "trajectory": trajectory_spec.model_dump(mode="json"),
            "presets": {"day": day.model_dump(), "night": night.model_dump()},
        }
        (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailure(out, e.strerror) from e
    logger.info("dataset with %d frames written to %s", len(trajectory), out)
    return out


class Dataset:
    """Read access to a generated dataset directory."""

    def __init__(self, path):
        self.path = Path(path)
        manifest_path = self.path / MANIFEST
        if not manifest_path.is_file():
            raise MissingDataset(f"no {MANIFEST} in {self.path}")
        self.manifest = json.loads(manifest_path.read_text())
        self.calibration = CalibrationSet(**self.manifest["calibration"])
        self.depth_scale = float(self.manifest["depth_scale"])

    def __len__(self) -> int:
        return int(self.manifest["frames"])

    @property
    def frames(self) -> range:
        return range(len(self))

    def image(self, condition: str, side: str, frame: int) -> ImageBuf:
        if condition not in CONDITIONS or side not in SIDES:
            raise ValueError(f"unknown image stream {condition}/{side}")
        return load_pnm(self.path / condition / side / _frame_name(frame, "ppm"))

    def gt_depth(self, frame: int) -> DepthMap:
        return load_depth_pgm(self.path / "gt" / "depth" / _frame_name(frame, "pgm"), self.depth_scale)

    def gt_labels(self, frame: int) -> SegMap:
        return load_labels_pgm(self.path / "gt" / "labels" / _frame_name(frame, "pgm"))

    def poses(self) -> Trajectory:
        return load_poses(self.path / "gt" / "poses.txt")


def open_dataset(path) -> Dataset:
    return Dataset(path)
