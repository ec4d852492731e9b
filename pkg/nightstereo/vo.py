"""DoG keypoints and stereo visual odometry.

Keypoints come from a small Gaussian scale space. Odometry triangulates
stereo-matched keypoints in one frame, tracks them into the next left image,
and solves the relative pose with a Huber-weighted Gauss-Newton over SE(3).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from nightstereo.errors import (
    DegenerateGeometry,
    EmptySequence,
    ImageTooSmall,
    MissingWaypoint,
    TooFewPoints,
)
from nightstereo.geometry import CalibrationSet, Pose, Trajectory, backproject, skew
from nightstereo.imaging import ImageBuf, gaussian_filter_plane, to_grayscale
from nightstereo.reports import MetricsReport

logger = logging.getLogger(__name__)

MIN_IMAGE_SIZE = 32
DESCRIPTOR_SIZE = 16
_ASSUMED_BLUR = 0.5
_EXACT_NCC = 1.0 - 1e-6


class VoParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    octaves: int = Field(default=3, ge=1)
    scales: int = Field(default=3, ge=1, description="scales per octave")
    sigma0: float = Field(default=1.6, gt=0.0)
    contrast: float = Field(default=0.03, gt=0.0)
    edge_ratio: float = Field(default=10.0, gt=1.0)
    max_keypoints: int = Field(default=400, ge=1)
    dmax: int = Field(default=64, ge=0)
    ncc_min: float = 0.8
    ratio: float = Field(default=1.05, ge=1.0)
    track_radius: int = Field(default=12, ge=1)
    huber: float = Field(default=2.0, gt=0.0, description="px")
    reject: float = Field(default=4.0, gt=0.0, description="px")
    iterations: int = Field(default=10, ge=1)
    min_points: int = Field(default=6, ge=6)
    d_min: float = Field(default=0.5, ge=0.0)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    octave: int
    scale: int
    response: float

    @property
    def step(self) -> int:
        """Pixel spacing of the keypoint's octave."""
        return 2 ** self.octave


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------

def _gray(img) -> np.ndarray:
    if isinstance(img, ImageBuf):
        return to_grayscale(img).plane
    return np.asarray(img, dtype=np.float64)


def _parabola_offset(minus, centre, plus):
    denom = minus - 2.0 * centre + plus
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = np.where(denom != 0, 0.5 * (minus - plus) / denom, 0.0)
    return np.clip(np.nan_to_num(offset), -0.5, 0.5)


def gaussian_pyramid(plane: np.ndarray, params: VoParams) -> List[List[np.ndarray]]:
    """octaves x (scales + 3) blurred images, each octave half the size of the last."""
    k = 2.0 ** (1.0 / params.scales)
    sigmas = [params.sigma0 * k ** i for i in range(params.scales + 3)]
    base = gaussian_filter_plane(plane, math.sqrt(params.sigma0 ** 2 - _ASSUMED_BLUR ** 2))
    pyramid = []
    for octave in range(params.octaves):
        levels = [base]
        for i in range(1, len(sigmas)):
            levels.append(gaussian_filter_plane(levels[-1], math.sqrt(sigmas[i] ** 2 - sigmas[i - 1] ** 2)))
        pyramid.append(levels)
        base = levels[params.scales][::2, ::2]
        if min(base.shape) < 3:
            break
    return pyramid


def dog_keypoints(img, params: VoParams = VoParams()) -> List[Keypoint]:
    """Difference-of-Gaussian extrema with contrast and edge rejection.

    Returned in row-major order of position, then octave and scale.
    """
    plane = _gray(img)
    if plane.shape[0] < MIN_IMAGE_SIZE or plane.shape[1] < MIN_IMAGE_SIZE:
        raise ImageTooSmall(f"keypoint detection needs >= {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, got {plane.shape}")
    edge_limit = (params.edge_ratio + 1.0) ** 2 / params.edge_ratio
    keypoints = []
    for octave, levels in enumerate(gaussian_pyramid(plane, params)):
        dog = np.stack([b - a for a, b in zip(levels, levels[1:])])
        if min(dog.shape[1:]) < 3:
            break
        is_max = dog == ndimage.maximum_filter(dog, size=3, mode="nearest")
        is_min = dog == ndimage.minimum_filter(dog, size=3, mode="nearest")
        candidates = (is_max | is_min) & (np.abs(dog) >= params.contrast)
        candidates[0] = candidates[-1] = False
        candidates[:, [0, -1], :] = False
        candidates[:, :, [0, -1]] = False
        s, y, x = np.nonzero(candidates)
        if len(s) == 0:
            continue
        d = dog[s, y, x]
        dxx = dog[s, y, x + 1] + dog[s, y, x - 1] - 2 * d
        dyy = dog[s, y + 1, x] + dog[s, y - 1, x] - 2 * d
        dxy = (dog[s, y + 1, x + 1] - dog[s, y + 1, x - 1] - dog[s, y - 1, x + 1] + dog[s, y - 1, x - 1]) / 4
        det = dxx * dyy - dxy ** 2
        keep = (det > 0) & ((dxx + dyy) ** 2 < edge_limit * det)
        ox = _parabola_offset(dog[s, y, x - 1], d, dog[s, y, x + 1])
        oy = _parabola_offset(dog[s, y - 1, x], d, dog[s, y + 1, x])
        step = 2 ** octave
        for i in np.nonzero(keep)[0]:
            keypoints.append(Keypoint(float((x[i] + ox[i]) * step), float((y[i] + oy[i]) * step),
                                      octave, int(s[i]), float(d[i])))
    if len(keypoints) > params.max_keypoints:
        strongest = sorted(range(len(keypoints)), key=lambda i: -abs(keypoints[i].response))
        keypoints = [keypoints[i] for i in sorted(strongest[:params.max_keypoints])]
    return sorted(keypoints, key=lambda kp: (kp.y, kp.x, kp.octave, kp.scale))


def keypoint_delta(night: ImageBuf, enhanced: ImageBuf, params: VoParams = VoParams()) -> MetricsReport:
    n_night = len(dog_keypoints(night, params))
    n_enhanced = len(dog_keypoints(enhanced, params))
    return MetricsReport("keypoints", {"night": n_night, "enhanced": n_enhanced, "delta": n_enhanced - n_night})


# ---------------------------------------------------------------------------
# descriptors, stereo matching, tracking
# ---------------------------------------------------------------------------

def _sample(plane: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(plane, [grid_y, grid_x], order=1, mode="nearest")


def _offsets(size: int, step: float = 1.0) -> np.ndarray:
    return (np.arange(size) - (size - 1) / 2.0) * step


def _fits(plane: np.ndarray, x: float, y: float, half_x: float, half_y: float) -> bool:
    h, w = plane.shape
    return x - half_x >= 0 and y - half_y >= 0 and x + half_x <= w - 1 and y + half_y <= h - 1


def _normalize(patch: np.ndarray) -> np.ndarray:
    v = patch.reshape(-1) - patch.mean()
    norm = np.linalg.norm(v)
    return v / norm if norm > 1e-8 else np.zeros_like(v)


def describe(img, kp: Keypoint, scale_aware: bool = True) -> Optional[np.ndarray]:
    """Mean-free, unit-norm 16x16 patch around `kp`.

    None when the patch leaves the image; the zero vector marks a flat,
    unmatchable patch.
    """
    plane = _gray(img)
    step = kp.step if scale_aware else 1
    offs = _offsets(DESCRIPTOR_SIZE, step)
    half = offs[-1]
    if not _fits(plane, kp.x, kp.y, half, half):
        return None
    return _normalize(_sample(plane, kp.x + offs, kp.y + offs))


def _window_ncc(template: np.ndarray, region: np.ndarray) -> np.ndarray:
    """NCC of a normalized template against every same-sized window of `region`."""
    th, tw = template.shape
    windows = sliding_window_view(region, (th, tw))
    centred = windows - windows.mean(axis=(-2, -1), keepdims=True)
    norms = np.sqrt((centred ** 2).sum(axis=(-2, -1)))
    dots = np.einsum("ijkl,kl->ij", centred, template)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(norms > 1e-8, dots / norms, 0.0)


@dataclass(frozen=True)
class StereoMatch:
    keypoint: Keypoint
    disparity: float


def match_stereo(kps: Sequence[Keypoint], left, right, dmax: int, params: VoParams = VoParams()) -> List[StereoMatch]:
    """Row-wise NCC search for each keypoint's disparity in [0, dmax]."""
    left = _gray(left)
    right = _gray(right)
    offs = _offsets(DESCRIPTOR_SIZE)
    half = offs[-1]
    matches = []
    for kp in kps:
        if not _fits(left, kp.x, kp.y, half, half):
            continue
        template = _normalize(_sample(left, kp.x + offs, kp.y + offs)).reshape(DESCRIPTOR_SIZE, DESCRIPTOR_SIZE)
        if not template.any():
            continue
        reach = min(dmax, int(math.floor(kp.x - half)))
        if reach < 0:
            continue
        # strip columns run from x - reach to x; window j sits at disparity reach - j
        xs = np.arange(kp.x - reach - half, kp.x + half + 0.5)
        region = _sample(right, xs, kp.y + offs)
        scores = _window_ncc(template, region)[0][::-1]
        best = int(np.argmax(scores))
        peak = scores[best]
        if peak <= params.ncc_min:
            continue
        others = np.delete(scores, [i for i in (best - 1, best, best + 1) if 0 <= i < len(scores)])
        second = others.max() if len(others) else 0.0
        if second > 0 and peak / second <= params.ratio:
            continue
        offset = 0.0
        if 0 < best < len(scores) - 1:
            offset = float(_parabola_offset(scores[best - 1], peak, scores[best + 1]))
        matches.append(StereoMatch(kp, best + offset))
    return matches


@dataclass(frozen=True)
class TrackedPoint:
    index: int  # position in the keypoint list passed to track()
    x: float
    y: float


def track(prev, nxt, kps: Sequence[Keypoint], params: VoParams = VoParams()) -> List[TrackedPoint]:
    """NCC search of each keypoint's patch within +/- track_radius px in the next image."""
    prev = _gray(prev)
    nxt = _gray(nxt)
    radius = params.track_radius
    offs = _offsets(DESCRIPTOR_SIZE)
    half = offs[-1]
    tracks = []
    for index, kp in enumerate(kps):
        if not _fits(prev, kp.x, kp.y, half, half) or not _fits(nxt, kp.x, kp.y, half + radius, half + radius):
            continue
        template = _normalize(_sample(prev, kp.x + offs, kp.y + offs)).reshape(DESCRIPTOR_SIZE, DESCRIPTOR_SIZE)
        if not template.any():
            continue
        search = _offsets(DESCRIPTOR_SIZE + 2 * radius)
        scores = _window_ncc(template, _sample(nxt, kp.x + search, kp.y + search))
        by, bx = np.unravel_index(int(np.argmax(scores)), scores.shape)
        peak = scores[by, bx]
        if peak <= params.ncc_min:
            continue
        dx, dy = float(bx - radius), float(by - radius)
        if peak < _EXACT_NCC:
            if 0 < bx < scores.shape[1] - 1:
                dx += float(_parabola_offset(scores[by, bx - 1], peak, scores[by, bx + 1]))
            if 0 < by < scores.shape[0] - 1:
                dy += float(_parabola_offset(scores[by - 1, bx], peak, scores[by + 1, bx]))
        tracks.append(TrackedPoint(index, kp.x + dx, kp.y + dy))
    return tracks


# ---------------------------------------------------------------------------
# pose solver
# ---------------------------------------------------------------------------

def reprojection_residuals(pose: Pose, points: np.ndarray, obs: np.ndarray, calib: CalibrationSet) -> np.ndarray:
    p = pose.apply(points)
    z = p[:, 2]
    u = calib.fx * p[:, 0] / z + calib.cx
    v = calib.fy * p[:, 1] / z + calib.cy
    return np.stack([u, v], axis=1) - obs


def reprojection_jacobian(pose: Pose, points: np.ndarray, calib: CalibrationSet) -> np.ndarray:
    """(N, 2, 6) derivative of the residual w.r.t. a left-multiplied twist (omega, v)."""
    p = pose.apply(points)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    j_proj = np.zeros((len(p), 2, 3))
    j_proj[:, 0, 0] = calib.fx / z
    j_proj[:, 0, 2] = -calib.fx * x / z ** 2
    j_proj[:, 1, 1] = calib.fy / z
    j_proj[:, 1, 2] = -calib.fy * y / z ** 2
    j_point = np.zeros((len(p), 3, 6))
    j_point[:, :, :3] = -np.stack([skew(q) for q in p])
    j_point[:, :, 3:] = np.eye(3)
    return j_proj @ j_point


def huber_cost(errors: np.ndarray, delta: float) -> float:
    quadratic = errors <= delta
    return float(np.sum(np.where(quadratic, 0.5 * errors ** 2, delta * (errors - 0.5 * delta))))


def _objective(pose, points, obs, calib, delta):
    p = pose.apply(points)
    if np.any(p[:, 2] <= 1e-9):
        return math.inf
    return huber_cost(np.linalg.norm(reprojection_residuals(pose, points, obs, calib), axis=1), delta)


@dataclass
class GaussNewtonResult:
    pose: Pose
    costs: List[float] = field(default_factory=list)
    inliers: Optional[np.ndarray] = None


def gauss_newton_refine(points: np.ndarray, obs: np.ndarray, calib: CalibrationSet, init: Pose,
                        params: VoParams = VoParams()) -> GaussNewtonResult:
    """Huber-weighted Gauss-Newton with backtracking; the recorded cost never increases."""
    pose = init.orthonormalized()
    cost = _objective(pose, points, obs, calib, params.huber)
    if not math.isfinite(cost):
        raise DegenerateGeometry("initial pose puts points behind the camera")
    result = GaussNewtonResult(pose, [cost])
    for _ in range(params.iterations):
        residuals = reprojection_residuals(pose, points, obs, calib)
        errors = np.linalg.norm(residuals, axis=1)
        weights = np.where(errors <= params.huber, 1.0, params.huber / np.maximum(errors, 1e-12))
        jac = reprojection_jacobian(pose, points, calib)
        hessian = np.einsum("n,nki,nkj->ij", weights, jac, jac)
        gradient = np.einsum("n,nki,nk->i", weights, jac, residuals)
        eigen = np.linalg.eigvalsh(hessian)
        if eigen[0] <= 1e-12 * max(eigen[-1], 1e-300):
            raise DegenerateGeometry("normal equations are rank deficient")
        step = -np.linalg.solve(hessian, gradient)

        scale = 1.0
        for _ in range(20):
            candidate = (Pose.from_twist(scale * step) @ pose).orthonormalized()
            candidate_cost = _objective(candidate, points, obs, calib, params.huber)
            if candidate_cost <= cost:
                break
            scale *= 0.5
        else:
            break
        pose, cost = candidate, candidate_cost
        result.costs.append(cost)
        if np.linalg.norm(scale * step) < 1e-8:
            break
    result.pose = pose
    return result


def solve_pose_gn(points3d: np.ndarray, obs2d: np.ndarray, calib: CalibrationSet, init: Pose = Pose(),
                  params: VoParams = VoParams()) -> Pose:
    """Relative pose mapping previous-camera points into the next camera frame."""
    points3d = np.asarray(points3d, dtype=np.float64)
    obs2d = np.asarray(obs2d, dtype=np.float64)
    if len(points3d) < params.min_points:
        raise TooFewPoints(f"{len(points3d)} correspondences, need {params.min_points}")
    first = gauss_newton_refine(points3d, obs2d, calib, init, params)
    errors = np.linalg.norm(reprojection_residuals(first.pose, points3d, obs2d, calib), axis=1)
    inliers = errors <= params.reject
    if inliers.all() or inliers.sum() < params.min_points:
        return first.pose
    return gauss_newton_refine(points3d[inliers], obs2d[inliers], calib, first.pose, params).pose


# ---------------------------------------------------------------------------
# odometry
# ---------------------------------------------------------------------------

class StereoOdometry:
    """Frame-by-frame stereo VO with constant-velocity fallback."""

    def __init__(self, calib: CalibrationSet, params: VoParams = VoParams()):
        self.calib = calib.check()
        self.params = params
        self.trajectory = Trajectory()
        self._prev_left: Optional[np.ndarray] = None
        self._prev_keypoints: List[Keypoint] = []
        self._prev_points: np.ndarray = np.zeros((0, 3))
        self._motion = Pose()

    @property
    def fallback_count(self) -> int:
        return self.trajectory.fallback_count

    def _triangulate(self, left: np.ndarray, right: np.ndarray):
        kps = dog_keypoints(left, self.params)
        matches = [m for m in match_stereo(kps, left, right, self.params.dmax, self.params)
                   if m.disparity > self.params.d_min]
        if not matches:
            return [], np.zeros((0, 3))
        uv = np.array([[m.keypoint.x, m.keypoint.y] for m in matches])
        depth = np.array([self.calib.fx * self.calib.baseline / m.disparity for m in matches])
        return [m.keypoint for m in matches], backproject(uv, depth, self.calib)

    def step(self, frame: int, left: ImageBuf, right: ImageBuf) -> Pose:
        left_plane = _gray(left)
        right_plane = _gray(right)
        if self._prev_left is None:
            pose = Pose()
        else:
            tracks = track(self._prev_left, left_plane, self._prev_keypoints, self.params)
            try:
                points = self._prev_points[[t.index for t in tracks]] if tracks else np.zeros((0, 3))
                obs = np.array([[t.x, t.y] for t in tracks]).reshape(-1, 2)
                self._motion = solve_pose_gn(points, obs, self.calib, self._motion, self.params)
            except (TooFewPoints, DegenerateGeometry) as e:
                self.trajectory.fallback_count += 1
                logger.debug("frame %d: %s, reusing previous motion", frame, e)
            pose = self.trajectory.poses[-1] @ self._motion.inverse()
        self.trajectory.append(frame, pose)
        self._prev_left = left_plane
        self._prev_keypoints, self._prev_points = self._triangulate(left_plane, right_plane)
        return pose


def run_vo(dataset_dir, condition: str, calib: Optional[CalibrationSet] = None, params: VoParams = VoParams(),
           enhancer: Optional[Callable[[ImageBuf], ImageBuf]] = None) -> Trajectory:
    """Estimate the left-camera trajectory of a dataset under day, night or enhanced images."""
    from nightstereo.scenegen import open_dataset

    if condition not in ("day", "night", "enhanced"):
        raise ValueError(f"unknown condition {condition!r}")
    dataset = open_dataset(dataset_dir)
    if len(dataset) < 2:
        raise EmptySequence(f"{dataset.path} has {len(dataset)} frames, need 2")
    if condition == "enhanced" and enhancer is None:
        from nightstereo.enhance import EnhanceParams, FusionWeights, enhance
        from nightstereo.segment import fit_centroids, segment_stub

        # raw-frame labels as the enhancement prior, as in the pipeline
        weights = FusionWeights.seeded(EnhanceParams().channels)
        model = fit_centroids(dataset.path)
        enhancer = lambda img: enhance(img, segment_stub(img, model), weights)
    source = "day" if condition == "day" else "night"
    odometry = StereoOdometry(calib or dataset.calibration, params)
    for frame in dataset.frames:
        left = dataset.image(source, "left", frame)
        right = dataset.image(source, "right", frame)
        if enhancer is not None and condition == "enhanced":
            left, right = enhancer(left), enhancer(right)
        odometry.step(frame, left, right)
    logger.info("%s odometry over %d frames, %d fallbacks", condition, len(dataset), odometry.fallback_count)
    return odometry.trajectory


# ---------------------------------------------------------------------------
# trajectory metrics
# ---------------------------------------------------------------------------

def _aligned_positions(est: Trajectory, gt: Trajectory, frames: Sequence[int]) -> np.ndarray:
    """Positions of `est` at `frames` after mapping its first frame onto gt's pose there."""
    anchor = est.frames[0] if est.frames else 0
    for f in [anchor, *frames]:
        if f not in est.frames or f not in gt.frames:
            raise MissingWaypoint(f"frame {f} missing from a trajectory")
    align = gt.pose_at(anchor) @ est.pose_at(anchor).inverse()
    return align.apply(np.array([est.pose_at(f).translation for f in frames]).reshape(-1, 3))


def waypoint_translation_error(est: Trajectory, gt: Trajectory, waypoints: Sequence[int]) -> MetricsReport:
    waypoints = list(waypoints)
    if not waypoints:
        raise MissingWaypoint("no waypoints given")
    est_positions = _aligned_positions(est, gt, waypoints)
    gt_positions = np.array([gt.pose_at(f).translation for f in waypoints])
    errors = np.linalg.norm(est_positions - gt_positions, axis=1)
    values = {"mean_error": float(errors.mean()), "max_error": float(errors.max()), "waypoints": len(waypoints)}
    values.update({f"wp_{f:06d}": float(e) for f, e in zip(waypoints, errors)})
    return MetricsReport("waypoints", values)


def endpoint_error(est: Trajectory, gt: Trajectory) -> MetricsReport:
    """Final-position error and its ratio to the ground-truth path length."""
    if not est.frames:
        raise EmptySequence("empty trajectory")
    last = est.frames[-1]
    error = float(np.linalg.norm(_aligned_positions(est, gt, [last])[0] - gt.pose_at(last).translation))
    frames = [f for f in gt.frames if f <= last]
    length = Trajectory(frames, [gt.pose_at(f) for f in frames]).path_length()
    return MetricsReport("endpoint", {
        "endpoint_error": error,
        "path_length": length,
        "ratio": error / length if length > 0 else 0.0,
    })


def default_waypoints(n: int, every: int = 10) -> List[int]:
    """Every `every`-th frame after the first; the last frame when the sequence is shorter."""
    if n < 1:
        return []
    waypoints = list(range(every, n, every))
    return waypoints or [n - 1]
