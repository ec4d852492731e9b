"""SNR-aware low-light enhancement with a semantic cross-attention prior.

The stage estimates a per-pixel signal-to-noise map, builds a short-range
(smoothed, local) and a long-range (attention over all tokens) feature,
blends them by SNR, lets semantic tokens attend over the result, and turns
the fused features into a smooth gain map applied to the denoised image.
Weights are fixed engineered matrices, seeded or loaded from JSON.
"""
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage
from scipy.special import expit, softmax

from nightstereo.errors import ChannelMismatch, ChannelsTooSmall, IoFailure, ShapeMismatch
from nightstereo.features import FeatureMap, patchify, pool_to_tokens, token_grid
from nightstereo.imaging import ImageBuf, box_blur, box_filter_plane, resample_bilinear, to_grayscale
from nightstereo.maps import SegMap
from nightstereo.segment import extract_semantic_features

logger = logging.getLogger(__name__)

NUM_ENGINEERED = 8
_BINOMIAL = np.array([1.0, 2.0, 1.0]) / 4.0
_KEY_FLOOR = 1e-6
_ROW_BLOCK = 512


class EnhanceParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    patch: int = Field(default=8, ge=1)
    channels: int = Field(default=16, ge=4)
    eps: float = Field(default=1e-3, gt=0.0)
    snr_cap: float = Field(default=50.0, gt=0.0)
    denoise_radius: int = Field(default=2, ge=0)
    denoise_strength: float = Field(default=1.0, ge=0.0, le=1.0,
                                    description="blend towards the box-blurred image where SNR is low")
    weights_seed: int = 0
    weights_file: Optional[str] = None


@dataclass(frozen=True, eq=False)
class SnrMap:
    values: np.ndarray
    mask: np.ndarray

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class AttentionMatrix:
    """Row-stochastic attention weights: rows are query tokens, columns key tokens."""
    weights: np.ndarray

    @property
    def shape(self):
        return self.weights.shape


_MATRICES = ("wq", "wk", "wv", "w1", "b1", "w2", "b2", "w_rec")


@dataclass(frozen=True, eq=False)
class FusionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    w1: np.ndarray  # C x 4C
    b1: np.ndarray
    w2: np.ndarray  # 4C x C
    b2: np.ndarray
    w_rec: np.ndarray
    b_rec: float = 0.0
    g_max: float = 1.0

    def __post_init__(self):
        c = self.channels
        expected = {"wq": (c, c), "wk": (c, c), "wv": (c, c), "w1": (c, 4 * c), "b1": (4 * c,),
                    "w2": (4 * c, c), "b2": (c,), "w_rec": (c,)}
        for name, shape in expected.items():
            value = np.array(getattr(self, name), dtype=np.float64)
            if value.shape != shape:
                raise ShapeMismatch(f"{name} has shape {value.shape}, expected {shape}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} has non-finite entries")
            value.flags.writeable = False
            object.__setattr__(self, name, value)
        if not (math.isfinite(self.b_rec) and math.isfinite(self.g_max) and self.g_max >= 1.0):
            raise ValueError("b_rec must be finite and g_max >= 1")

    @property
    def channels(self) -> int:
        return np.shape(self.wq)[0]

    @staticmethod
    def _identity_ffn(c: int):
        w1 = np.zeros((c, 4 * c))
        w1[:, :c] = np.eye(c)
        w1[:, c:2 * c] = -np.eye(c)
        w2 = np.zeros((4 * c, c))
        w2[:c] = np.eye(c)
        w2[c:2 * c] = -np.eye(c)
        return w1, np.zeros(4 * c), w2, np.zeros(c)

    @classmethod
    def identity(cls, channels: int = 16) -> "FusionWeights":
        """Weights under which fusion returns F_I and reconstruction applies gain 1."""
        w1, b1, w2, b2 = cls._identity_ffn(channels)
        eye = np.eye(channels)
        return cls(eye, eye, np.zeros((channels, channels)), w1, b1, w2, b2,
                   np.zeros(channels), b_rec=0.0, g_max=1.0)

    @classmethod
    def seeded(cls, channels: int = 16, seed: int = 0, g_max: float = 4.0) -> "FusionWeights":
        """Deterministic default weights: random projections, near-identity FFN, brightness-driven gain."""
        if channels < 4:
            raise ChannelsTooSmall(f"fusion needs at least 4 channels, got {channels}")
        rng = np.random.default_rng(seed)
        scale = 1.0 / math.sqrt(channels)
        wq = rng.normal(0.0, scale, (channels, channels))
        wk = rng.normal(0.0, scale, (channels, channels))
        wv = 0.1 * rng.normal(0.0, scale, (channels, channels))
        w1, b1, w2, b2 = cls._identity_ffn(channels)
        w1 = w1 + 0.01 * rng.normal(0.0, scale, w1.shape)
        w_rec = np.zeros(channels)
        w_rec[0] = -10.0  # mean intensity: darker tokens get more gain
        return cls(wq, wk, wv, w1, b1, w2, b2, w_rec, b_rec=2.5, g_max=g_max)

    def ffn(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x @ self.w1 + self.b1, 0.0) @ self.w2 + self.b2


class WeightsFile(BaseModel):
    """JSON layout of a FusionWeights file."""
    model_config = ConfigDict(extra="forbid")

    channels: int
    b_rec: float
    g_max: float
    shapes: Dict[str, List[int]]
    matrices: Dict[str, List[float]]


def save_weights(weights: FusionWeights, path: Union[str, os.PathLike]) -> None:
    arrays = {name: getattr(weights, name) for name in _MATRICES}
    doc = WeightsFile(
        channels=weights.channels,
        b_rec=weights.b_rec,
        g_max=weights.g_max,
        shapes={k: list(v.shape) for k, v in arrays.items()},
        matrices={k: v.reshape(-1).tolist() for k, v in arrays.items()},
    )
    try:
        with open(path, "w") as f:
            f.write(doc.model_dump_json(indent=2))
    except OSError as e:
        raise IoFailure(path, e.strerror) from e


def load_weights(path: Union[str, os.PathLike]) -> FusionWeights:
    try:
        with open(path) as f:
            doc = WeightsFile.model_validate(json.load(f))
    except OSError as e:
        raise IoFailure(path, e.strerror) from e
    arrays = {k: np.asarray(doc.matrices[k], dtype=np.float64).reshape(doc.shapes[k]) for k in _MATRICES}
    return FusionWeights(**arrays, b_rec=doc.b_rec, g_max=doc.g_max)


def weights_for(params: EnhanceParams) -> FusionWeights:
    if params.weights_file:
        weights = load_weights(params.weights_file)
        if weights.channels != params.channels:
            raise ChannelMismatch(f"weights have {weights.channels} channels, config asks for {params.channels}")
        return weights
    return FusionWeights.seeded(params.channels, params.weights_seed)


# ---------------------------------------------------------------------------
# stage operations
# ---------------------------------------------------------------------------

def compute_snr_map(img: ImageBuf, denoise_radius: int = 2, eps: float = 1e-3, snr_cap: float = 50.0) -> SnrMap:
    if eps <= 0 or snr_cap <= 0:
        raise ValueError("eps and snr_cap must be positive")
    gray = to_grayscale(img).plane
    den = box_filter_plane(gray, denoise_radius)
    values = den / (np.abs(gray - den) + eps)
    return SnrMap(values, np.minimum(values / snr_cap, 1.0))


def embed_tokens(img: ImageBuf, patch: int = 8, channels: int = 16) -> FeatureMap:
    """Per-patch [mean, std, mean|dx|, mean|dy|, 4-bin histogram], zero-padded or cut to `channels`."""
    if channels < 4:
        raise ChannelsTooSmall(f"token embedding needs at least 4 channels, got {channels}")
    gray = to_grayscale(img).plane
    dx = np.abs(np.diff(gray, axis=1, append=gray[:, -1:]))
    dy = np.abs(np.diff(gray, axis=0, append=gray[-1:, :]))
    blocks = patchify(gray, patch)
    grid_h, grid_w, _ = blocks.shape
    bins = np.minimum((blocks * 4).astype(np.int64), 3)
    feats = [
        blocks.mean(axis=2),
        blocks.std(axis=2),
        patchify(dx, patch).mean(axis=2),
        patchify(dy, patch).mean(axis=2),
    ] + [(bins == b).mean(axis=2) for b in range(4)]
    engineered = np.stack(feats, axis=-1).reshape(grid_h * grid_w, NUM_ENGINEERED)
    tokens = np.zeros((grid_h * grid_w, channels))
    keep = min(channels, NUM_ENGINEERED)
    tokens[:, :keep] = engineered[:, :keep]
    return FeatureMap(tokens, grid_w, grid_h, patch)


def local_branch(img: ImageBuf, patch: int = 8, channels: int = 16) -> FeatureMap:
    """Short-range features: three 3x3 binomial passes, then token embedding."""
    data = img.data
    for _ in range(3):
        data = ndimage.correlate1d(data, _BINOMIAL, axis=0, mode="nearest")
        data = ndimage.correlate1d(data, _BINOMIAL, axis=1, mode="nearest")
    return embed_tokens(ImageBuf.from_array(data), patch, channels)


def _snr_tokens(snr: SnrMap, features: FeatureMap) -> np.ndarray:
    height, width = snr.shape
    if token_grid(width, height, features.patch) != (features.grid_w, features.grid_h):
        raise ShapeMismatch(
            f"snr map {width}x{height} does not tile to grid {features.grid_w}x{features.grid_h}")
    return pool_to_tokens(snr.mask, features.patch)


def _check_channels(weights: FusionWeights, *maps: FeatureMap) -> None:
    for fm in maps:
        if fm.channels != weights.channels:
            raise ChannelMismatch(f"features have {fm.channels} channels, weights {weights.channels}")


def _attend(queries: np.ndarray, keys: np.ndarray, values: np.ndarray,
            key_bias: Optional[np.ndarray] = None) -> np.ndarray:
    """softmax(q k^T / sqrt(C) + bias) v, evaluated in fixed row blocks."""
    scale = 1.0 / math.sqrt(queries.shape[1])
    out = np.empty((queries.shape[0], values.shape[1]))
    for start in range(0, queries.shape[0], _ROW_BLOCK):
        logits = queries[start:start + _ROW_BLOCK] @ keys.T * scale
        if key_bias is not None:
            logits = logits + key_bias[None, :]
        out[start:start + _ROW_BLOCK] = softmax(logits, axis=1) @ values
    return out


def global_branch(features: FeatureMap, snr: SnrMap, weights: FusionWeights) -> FeatureMap:
    """Long-range features: self-attention with low-SNR tokens suppressed as keys."""
    _check_channels(weights, features)
    s = _snr_tokens(snr, features)
    f = features.tokens
    out = _attend(f @ weights.wq, f @ weights.wk, f @ weights.wv, np.log(s + _KEY_FLOOR))
    return features.with_tokens(out)


def semantic_cross_attention(semantic: FeatureMap, image: FeatureMap, weights: FusionWeights) -> AttentionMatrix:
    """Row-softmax of (F_s Wq)(F_I Wk)^T / sqrt(C)."""
    if semantic.channels != image.channels:
        raise ChannelMismatch(f"semantic features have {semantic.channels} channels, image {image.channels}")
    _check_channels(weights, semantic, image)
    logits = (semantic.tokens @ weights.wq) @ (image.tokens @ weights.wk).T / math.sqrt(weights.channels)
    return AttentionMatrix(softmax(logits, axis=1))


def fuse_features(attention: AttentionMatrix, image: FeatureMap, weights: FusionWeights) -> FeatureMap:
    """F_f = FFN(A (F_I Wv) + F_I), FFN applied per token."""
    n = image.count
    if attention.shape != (n, n):
        raise ShapeMismatch(f"attention {attention.shape} does not match {n} image tokens")
    _check_channels(weights, image)
    mixed = attention.weights @ (image.tokens @ weights.wv) + image.tokens
    return image.with_tokens(weights.ffn(mixed))


def snr_guided_fusion(long_range: FeatureMap, short_range: FeatureMap, snr: SnrMap) -> FeatureMap:
    """s * F_short + (1 - s) * F_long per token."""
    if not long_range.same_grid(short_range) or long_range.channels != short_range.channels:
        raise ShapeMismatch("long- and short-range features differ in grid or channels")
    s = _snr_tokens(snr, short_range)[:, None]
    return short_range.with_tokens(s * short_range.tokens + (1.0 - s) * long_range.tokens)


def reconstruct(fused: FeatureMap, img_denoised: ImageBuf, snr: SnrMap, weights: FusionWeights) -> ImageBuf:
    """Apply the per-token gain 1 + (g_max - 1) sigmoid(w.F + b), bilinearly upsampled."""
    if snr.shape != (img_denoised.height, img_denoised.width):
        raise ShapeMismatch(f"snr map {snr.shape} vs image {img_denoised.shape[:2]}")
    if token_grid(img_denoised.width, img_denoised.height, fused.patch) != (fused.grid_w, fused.grid_h):
        raise ShapeMismatch("fused features do not tile the image")
    _check_channels(weights, fused)
    gains = 1.0 + (weights.g_max - 1.0) * expit(fused.tokens @ weights.w_rec + weights.b_rec)
    grid = gains.reshape(fused.grid_h, fused.grid_w)
    if weights.g_max == 1.0:
        gain_map = np.ones(snr.shape)
    else:
        padded = resample_bilinear(grid, fused.grid_w * fused.patch, fused.grid_h * fused.patch)
        gain_map = padded[:img_denoised.height, :img_denoised.width]
    return ImageBuf.from_array(img_denoised.data * gain_map[:, :, None])


def denoise(img: ImageBuf, snr: SnrMap, radius: int, strength: float) -> ImageBuf:
    """Blend towards the box-blurred image in proportion to (1 - SNR mask)."""
    if strength == 0.0 or radius == 0:
        return img
    blend = strength * (1.0 - snr.mask)[:, :, None]
    smoothed = box_blur(img, radius).data
    return ImageBuf.from_array(img.data - blend * (img.data - smoothed))


def enhance(img: ImageBuf, seg: Optional[SegMap], weights: FusionWeights,
            params: EnhanceParams = EnhanceParams()) -> ImageBuf:
    if seg is not None and seg.shape != (img.height, img.width):
        raise ShapeMismatch(f"segmentation {seg.shape} vs image {img.shape[:2]}")
    snr = compute_snr_map(img, params.denoise_radius, params.eps, params.snr_cap)
    denoised = denoise(img, snr, params.denoise_radius, params.denoise_strength)

    image_tokens = embed_tokens(img, params.patch, params.channels)
    short_range = local_branch(img, params.patch, params.channels)
    long_range = global_branch(image_tokens, snr, weights)
    fused = snr_guided_fusion(long_range, short_range, snr)

    if seg is not None:
        semantic = extract_semantic_features(seg, params.patch, params.channels)
    else:
        semantic = fused
    attention = semantic_cross_attention(semantic, fused, weights)
    return reconstruct(fuse_features(attention, fused, weights), denoised, snr, weights)
