"""Per-pixel label, disparity and depth maps plus their PGM persistence."""
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from nightstereo.errors import IoFailure, ShapeMismatch
from nightstereo.imaging import load_codes_pgm, save_codes_pgm

CLASS_NAMES = ("sky", "road", "building", "vehicle", "sign")
NUM_CLASSES = len(CLASS_NAMES)
SKY, ROAD, BUILDING, VEHICLE, SIGN = range(NUM_CLASSES)

INVALID = -1.0
SCALE_SIDECAR = "scale.json"

PathLike = Union[str, os.PathLike]


def _readonly(values: np.ndarray, dtype) -> np.ndarray:
    values = np.array(values, dtype=dtype)
    if values.ndim != 2:
        raise ShapeMismatch(f"map must be 2-D, got {values.shape}")
    values.flags.writeable = False
    return values


@dataclass(frozen=True, eq=False)
class SegMap:
    """Class id per pixel."""
    labels: np.ndarray
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        labels = _readonly(self.labels, np.uint8)
        if labels.size and int(labels.max()) >= self.num_classes:
            raise ValueError(f"class id {int(labels.max())} >= {self.num_classes}")
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self):
        return self.labels.shape


@dataclass(frozen=True, eq=False)
class _ScalarMap:
    values: np.ndarray

    def __post_init__(self):
        values = _readonly(self.values, np.float64)
        values = np.where(np.isfinite(values), values, INVALID)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def valid(self) -> np.ndarray:
        return self.values >= 0

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape


class DisparityMap(_ScalarMap):
    """Disparity in pixels; negative marks invalid."""


class DepthMap(_ScalarMap):
    """Metric z-depth in meters; negative marks invalid."""

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0


def nearest_index(n_out: int, n_in: int) -> np.ndarray:
    """Source index per output index on the half-pixel grid."""
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)


def resize_depth(depth: DepthMap, width: int, height: int) -> DepthMap:
    if (width, height) == (depth.width, depth.height):
        return depth
    return DepthMap(depth.values[nearest_index(height, depth.height)[:, None], nearest_index(width, depth.width)[None, :]])


def encode_scaled(values: np.ndarray, valid: np.ndarray, scale: float, offset: int) -> np.ndarray:
    """16-bit codes: value = (code - offset) * scale, code 0 = invalid."""
    codes = np.floor(np.asarray(values) / scale + 0.5) + offset
    ok = valid & (codes >= 1) & (codes <= 65535)
    return np.where(ok, codes, 0).astype(np.uint16)


def decode_scaled(codes: np.ndarray, scale: float, offset: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.float64)
    return np.where(codes > 0, (codes - offset) * scale, INVALID)


def save_depth_pgm(path: PathLike, depth: DepthMap, scale: float) -> None:
    save_codes_pgm(encode_scaled(depth.values, depth.valid, scale, 0), path)


def load_depth_pgm(path: PathLike, scale: float) -> DepthMap:
    return DepthMap(decode_scaled(load_codes_pgm(path), scale, 0))


def save_disparity_pgm(path: PathLike, disp: DisparityMap, scale: float) -> None:
    save_codes_pgm(encode_scaled(disp.values, disp.valid, scale, 1), path)


def load_disparity_pgm(path: PathLike, scale: float) -> DisparityMap:
    return DisparityMap(decode_scaled(load_codes_pgm(path), scale, 1))


def save_labels_pgm(path: PathLike, seg: SegMap) -> None:
    save_codes_pgm(seg.labels.astype(np.uint8), path)


def load_labels_pgm(path: PathLike, num_classes: int = NUM_CLASSES) -> SegMap:
    return SegMap(load_codes_pgm(path).astype(np.uint8), num_classes)


def write_scale_sidecar(directory: PathLike, scale: float, offset: int, unit: str) -> None:
    path = Path(directory) / SCALE_SIDECAR
    try:
        path.write_text(json.dumps({"scale": scale, "offset": offset, "unit": unit}, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailure(path, e.strerror) from e


def read_scale_sidecar(directory: PathLike) -> dict:
    path = Path(directory) / SCALE_SIDECAR
    try:
        return json.loads(path.read_text())
    except OSError as e:
        raise IoFailure(path, e.strerror) from e
