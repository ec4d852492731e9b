"""Nearest-centroid pixel classifier and the semantic prior it feeds to enhancement.

The classifier works on four engineered features per pixel (intensity,
blurred intensity, gradient magnitude, normalized row) so that it is fixed,
trainingless and still sensitive to illumination and noise.
"""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
from scipy import ndimage

from nightstereo.errors import ChannelsTooSmall, IoFailure, MissingClass, ShapeMismatch, UnfittedModel
from nightstereo.features import FeatureMap, patchify, token_grid
from nightstereo.imaging import ImageBuf, box_blur, to_grayscale
from nightstereo.maps import CLASS_NAMES, NUM_CLASSES, SegMap, nearest_index
from nightstereo.scenegen import open_dataset

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("intensity", "blurred", "gradient", "row")
_CENTRAL_DIFF = np.array([-0.5, 0.0, 0.5])


@dataclass(eq=False)
class CentroidModel:
    """K centroids in scaled feature space plus the per-feature scales."""
    centroids: Optional[np.ndarray] = None
    scales: np.ndarray = field(default_factory=lambda: np.ones(len(FEATURE_NAMES)))
    missing: List[int] = field(default_factory=list)

    @property
    def fitted(self) -> bool:
        return self.centroids is not None

    @property
    def num_classes(self) -> int:
        return 0 if self.centroids is None else self.centroids.shape[0]


def pixel_features(img: ImageBuf, scales: Optional[np.ndarray] = None) -> np.ndarray:
    """(H, W, 4) features, divided by `scales` when given."""
    gray_img = to_grayscale(img)
    gray = gray_img.plane
    blurred = box_blur(gray_img, 2).plane
    dx = ndimage.correlate1d(gray, _CENTRAL_DIFF, axis=1, mode="nearest")
    dy = ndimage.correlate1d(gray, _CENTRAL_DIFF, axis=0, mode="nearest")
    rows = np.broadcast_to((np.arange(img.height) / img.height)[:, None], gray.shape)
    feats = np.stack([gray, blurred, np.abs(dx) + np.abs(dy), rows], axis=-1)
    if scales is not None:
        feats = feats / np.asarray(scales)
    return feats


def fit_centroids(dataset_dir, max_frames: int = 20, num_classes: int = NUM_CLASSES) -> CentroidModel:
    """Per-class mean features over evenly sampled day frames of a dataset.

    Classes with no labeled pixel are logged and recorded in `missing`;
    their centroid is the zero vector and they are never predicted.
    """
    dataset = open_dataset(dataset_dir)
    count = min(max_frames, len(dataset))
    frames = sorted(set(np.linspace(0, len(dataset) - 1, count).round().astype(int).tolist())) if count else []

    feats, labels = [], []
    for frame in frames:
        feats.append(pixel_features(dataset.image("day", "left", frame)).reshape(-1, len(FEATURE_NAMES)))
        labels.append(dataset.gt_labels(frame).labels.reshape(-1))
    feats = np.concatenate(feats) if feats else np.zeros((0, len(FEATURE_NAMES)))
    labels = np.concatenate(labels) if labels else np.zeros(0, dtype=np.uint8)
    model = centroids_from_samples(feats, labels, num_classes)
    logger.info("fitted %d centroids from %d frames (%d pixels)", num_classes, len(frames), len(labels))
    return model


def centroids_from_samples(feats: np.ndarray, labels: np.ndarray, num_classes: int = NUM_CLASSES) -> CentroidModel:
    """Fit from unscaled (N, 4) features and their class ids."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    scales = feats.std(axis=0) if len(feats) else np.ones(len(FEATURE_NAMES))
    scales = np.where(scales > 0, scales, 1.0)
    scaled = feats / scales
    centroids = np.zeros((num_classes, len(FEATURE_NAMES)))
    missing = []
    for k in range(num_classes):
        members = scaled[labels == k]
        if len(members) == 0:
            name = CLASS_NAMES[k] if k < len(CLASS_NAMES) else str(k)
            logger.warning("%s", MissingClass(f"class {k} ({name}) has no labeled pixels"))
            missing.append(k)
            continue
        centroids[k] = members.mean(axis=0)
    return CentroidModel(centroids, scales, missing)


def segment_stub(img: ImageBuf, model: CentroidModel) -> SegMap:
    """Label each pixel with its nearest centroid; ties go to the lower class id."""
    if not model.fitted:
        raise UnfittedModel("centroid model has not been fitted")
    feats = pixel_features(img, model.scales)
    dist = ((feats[:, :, None, :] - model.centroids[None, None, :, :]) ** 2).sum(axis=-1)
    if model.missing:
        dist[:, :, model.missing] = np.inf
    return SegMap(np.argmin(dist, axis=-1).astype(np.uint8), model.num_classes)


def extract_semantic_features(seg: SegMap, patch: int, channels: int) -> FeatureMap:
    """Normalized per-token class histogram, zero-padded to `channels`."""
    if channels < seg.num_classes:
        raise ChannelsTooSmall(f"{channels} channels cannot hold {seg.num_classes} class bins")
    blocks = patchify(seg.labels, patch)
    grid_h, grid_w, area = blocks.shape
    tokens = np.zeros((grid_h * grid_w, channels))
    flat = blocks.reshape(-1, area)
    for k in range(seg.num_classes):
        tokens[:, k] = (flat == k).sum(axis=1) / area
    grid = token_grid(seg.width, seg.height, patch)
    return FeatureMap(tokens, grid[0], grid[1], patch)


def pixel_accuracy(pred: SegMap, gt: SegMap) -> float:
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return float(np.mean(pred.labels == gt.labels))


def resize_labels(seg: SegMap, width: int, height: int) -> SegMap:
    """Nearest-neighbour resize on the half-pixel grid."""
    if (width, height) == (seg.width, seg.height):
        return seg
    ys = nearest_index(height, seg.height)
    xs = nearest_index(width, seg.width)
    return SegMap(seg.labels[ys[:, None], xs[None, :]], seg.num_classes)


def save_model(model: CentroidModel, path: Union[str, os.PathLike]) -> None:
    if not model.fitted:
        raise UnfittedModel("refusing to save an unfitted model")
    payload = {
        "K": model.num_classes,
        "centroids": model.centroids.tolist(),
        "scales": model.scales.tolist(),
        "missing": model.missing,
    }
    try:
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)
    except OSError as e:
        raise IoFailure(path, e.strerror) from e


def load_model(path: Union[str, os.PathLike]) -> CentroidModel:
    try:
        with open(path) as f:
            payload = json.load(f)
    except OSError as e:
        raise IoFailure(path, e.strerror) from e
    centroids = np.asarray(payload["centroids"], dtype=np.float64)
    if centroids.shape != (payload["K"], len(FEATURE_NAMES)):
        raise ShapeMismatch(f"centroid array {centroids.shape} does not match K={payload['K']}")
    return CentroidModel(centroids, np.asarray(payload["scales"], dtype=np.float64), list(payload.get("missing", [])))
