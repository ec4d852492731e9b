"""Plane-sweep stereo: ZNCC cost volume, winner-take-all readout, filtering, depth metrics."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from nightstereo.errors import NoOverlap, ShapeMismatch
from nightstereo.geometry import CalibrationSet
from nightstereo.imaging import ImageBuf, to_grayscale
from nightstereo.maps import INVALID, DepthMap, DisparityMap
from nightstereo.reports import MetricsReport

logger = logging.getLogger(__name__)

_FLAT_VARIANCE = 1e-10


class StereoParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dmax: int = Field(default=64, ge=0)
    window: int = Field(default=7, ge=3)
    lr_tol: float = Field(default=1.0, gt=0.0, description="left-right check tolerance, px")
    filter_radius: int = Field(default=2, ge=0)
    d_min: float = Field(default=0.5, ge=0.0)


@dataclass(frozen=True, eq=False)
class CostVolume:
    """costs[d, y, x] for d in 0..dmax; `invalid` flags windows leaving the image."""
    costs: np.ndarray
    invalid: np.ndarray
    window: int

    def __post_init__(self):
        if self.costs.shape != self.invalid.shape or self.costs.ndim != 3:
            raise ShapeMismatch(f"costs {self.costs.shape} vs invalid {self.invalid.shape}")
        if not np.all(np.isfinite(self.costs)):
            raise ValueError("cost volume must be finite")

    @property
    def dmax(self) -> int:
        return self.costs.shape[0] - 1


def _plane(img) -> np.ndarray:
    if isinstance(img, ImageBuf):
        return to_grayscale(img).plane
    return np.asarray(img, dtype=np.float64)


def _zncc_cost(left: np.ndarray, right: np.ndarray, d: int, size: int) -> np.ndarray:
    shifted = np.empty_like(right)
    shifted[:, d:] = right[:, :right.shape[1] - d]
    shifted[:, :d] = right[:, :1]
    mean = lambda a: ndimage.uniform_filter(a, size=size, mode="nearest")
    mu_l = mean(left)
    mu_r = mean(shifted)
    var_l = mean(left * left) - mu_l * mu_l
    var_r = mean(shifted * shifted) - mu_r * mu_r
    cov = mean(left * shifted) - mu_l * mu_r
    flat = (var_l <= _FLAT_VARIANCE) | (var_r <= _FLAT_VARIANCE)
    denom = np.sqrt(np.where(flat, 1.0, var_l * var_r))
    zncc = np.where(flat, 0.0, cov / denom)
    return np.clip(1.0 - zncc, 0.0, 2.0)


def cost_volume(left, right, dmax: int, window: int, workers: int = 1) -> CostVolume:
    """1 - ZNCC between the left window at x and the right window at x - d.

    Each hypothesis is computed independently, so splitting them across
    workers gives identical volumes.
    """
    left = _plane(left)
    right = _plane(right)
    if left.shape != right.shape:
        raise ShapeMismatch(f"left {left.shape} vs right {right.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if dmax < 0:
        raise ValueError(f"dmax must be >= 0, got {dmax}")
    height, width = left.shape
    half = window // 2
    disparities = range(dmax + 1)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        costs = np.stack(list(pool.map(lambda d: _zncc_cost(left, right, min(d, width), window), disparities)))

    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]
    border = (ys < half) | (ys >= height - half) | (xs < half) | (xs >= width - half)
    offsets = np.arange(dmax + 1)[:, None, None]
    invalid = border[None, :, :] | (xs[None, :, :] - offsets - half < 0)
    return CostVolume(costs, invalid, window)


def wta_disparity(cv: CostVolume) -> DisparityMap:
    """Lowest-cost valid hypothesis per pixel with parabolic sub-pixel refinement."""
    masked = np.where(cv.invalid, np.inf, cv.costs)
    best = np.argmin(masked, axis=0)
    rows, cols = np.indices(best.shape)
    c0 = masked[best, rows, cols]
    valid = np.isfinite(c0)

    lower = np.clip(best - 1, 0, cv.dmax)
    upper = np.clip(best + 1, 0, cv.dmax)
    c_minus = masked[lower, rows, cols]
    c_plus = masked[upper, rows, cols]
    interior = (best > 0) & (best < cv.dmax) & np.isfinite(c_minus) & np.isfinite(c_plus)
    with np.errstate(invalid="ignore", divide="ignore"):
        denom = c_minus - 2.0 * c0 + c_plus
        offset = np.where(interior & (denom > 0), 0.5 * (c_minus - c_plus) / denom, 0.0)
    offset = np.clip(np.nan_to_num(offset), -0.5, 0.5)
    return DisparityMap(np.where(valid, best + offset, INVALID))


def right_disparity(left, right, dmax: int, window: int, workers: int = 1) -> DisparityMap:
    """Disparity map of the right view, computed by mirroring the pair."""
    left = _plane(left)[:, ::-1]
    right = _plane(right)[:, ::-1]
    mirrored = wta_disparity(cost_volume(right, left, dmax, window, workers))
    return DisparityMap(mirrored.values[:, ::-1])


def lr_consistency(disp_left: DisparityMap, disp_right: DisparityMap, tol: float) -> DisparityMap:
    """Invalidate p where |dL(p) - dR(p - dL(p))| > tol or the match leaves the image."""
    if disp_left.shape != disp_right.shape:
        raise ShapeMismatch(f"left disparity {disp_left.shape} vs right {disp_right.shape}")
    if np.isinf(tol):
        return disp_left
    values = disp_left.values
    rows, cols = np.indices(values.shape)
    target = np.rint(cols - values).astype(np.int64)
    inside = disp_left.valid & (target >= 0) & (target < values.shape[1])
    matched = disp_right.values[rows, np.clip(target, 0, values.shape[1] - 1)]
    consistent = inside & (matched >= 0) & (np.abs(values - matched) <= tol)
    return DisparityMap(np.where(consistent, values, INVALID))


def patch_average_filter(disp: DisparityMap, radius: int) -> DisparityMap:
    """Mean of the valid disparities in the (2r+1)^2 patch around each pixel."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return disp
    kernel = np.ones((2 * radius + 1, 2 * radius + 1))
    valid = disp.valid.astype(np.float64)
    sums = ndimage.correlate(np.where(disp.valid, disp.values, 0.0), kernel, mode="constant")
    counts = ndimage.correlate(valid, kernel, mode="constant")
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = sums / counts
    return DisparityMap(np.where(counts > 0.5, mean, INVALID))


def disparity_to_depth(disp: DisparityMap, calib: CalibrationSet, d_min: float = 0.5) -> DepthMap:
    calib.check()
    values = disp.values
    ok = disp.valid & (values > d_min)
    with np.errstate(divide="ignore"):
        depth = calib.fx * calib.baseline / np.where(ok, values, 1.0)
    return DepthMap(np.where(ok, depth, INVALID))


def estimate_depth(left: ImageBuf, right: ImageBuf, calib: CalibrationSet,
                   params: StereoParams = StereoParams(), workers: int = 1) -> Tuple[DisparityMap, DepthMap]:
    """Cost volume, WTA, left-right check, patch average, then metric depth."""
    disp_l = wta_disparity(cost_volume(left, right, params.dmax, params.window, workers))
    disp_r = right_disparity(left, right, params.dmax, params.window, workers)
    disp = lr_consistency(disp_l, disp_r, params.lr_tol)
    disp = patch_average_filter(disp, params.filter_radius)
    return disp, disparity_to_depth(disp, calib, params.d_min)


def depth_error(pred: DepthMap, gt: DepthMap) -> MetricsReport:
    """MAE, mean absolute relative error and coverage over jointly valid pixels.

    `valid_fraction` is the share of ground-truth-valid pixels the prediction covers.
    """
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    joint = pred.valid & gt.valid
    n = int(joint.sum())
    if n == 0:
        raise NoOverlap("prediction and ground truth share no valid pixel")
    diff = np.abs(pred.values[joint] - gt.values[joint])
    return MetricsReport("depth", {
        "mae": float(diff.mean()),
        "abs_rel": float((diff / gt.values[joint]).mean()),
        "valid_fraction": n / int(gt.valid.sum()),
    })


def lidar_sample(gt: DepthMap, rows: int = 32, stride: int = 4) -> DepthMap:
    """Sparse scan-line subset of a dense depth map, like a spinning LiDAR's returns."""
    if rows < 1 or stride < 1:
        raise ValueError("rows and stride must be >= 1")
    keep = np.zeros(gt.shape, dtype=bool)
    scan_rows = np.unique(np.linspace(0, gt.height - 1, min(rows, gt.height)).round().astype(int))
    keep[np.ix_(scan_rows, np.arange(0, gt.width, stride))] = True
    return DepthMap(np.where(keep & gt.valid, gt.values, INVALID))


def depth_reduction(night: MetricsReport, enhanced: MetricsReport, key: str = "abs_rel") -> float:
    """Relative error reduction of `enhanced` over `night`, percent."""
    if night[key] == 0:
        return 0.0
    return 100.0 * (night[key] - enhanced[key]) / night[key]
