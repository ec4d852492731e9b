"""Token grids shared by the enhancement and segmentation stages."""
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from nightstereo.errors import ShapeMismatch


def token_grid(width: int, height: int, patch: int) -> Tuple[int, int]:
    """(grid_w, grid_h) after clamp-padding the image to a multiple of `patch`."""
    if patch < 1:
        raise ValueError(f"patch must be >= 1, got {patch}")
    return math.ceil(width / patch), math.ceil(height / patch)


def patchify(plane: np.ndarray, patch: int) -> np.ndarray:
    """Split an (H, W) array into (grid_h, grid_w, patch*patch) blocks.

    The array is first padded by edge replication to a multiple of `patch`.
    """
    plane = np.asarray(plane)
    h, w = plane.shape
    grid_w, grid_h = token_grid(w, h, patch)
    padded = np.pad(plane, ((0, grid_h * patch - h), (0, grid_w * patch - w)), mode="edge")
    blocks = padded.reshape(grid_h, patch, grid_w, patch).transpose(0, 2, 1, 3)
    return blocks.reshape(grid_h, grid_w, patch * patch)


def pool_to_tokens(plane: np.ndarray, patch: int) -> np.ndarray:
    """Per-token mean of an (H, W) array, flattened row-major."""
    return patchify(np.asarray(plane, dtype=np.float64), patch).mean(axis=2).reshape(-1)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Row-major grid of C-channel tokens, one per patch x patch block."""
    tokens: np.ndarray
    grid_w: int
    grid_h: int
    patch: int

    def __post_init__(self):
        tokens = np.array(self.tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] != self.grid_w * self.grid_h:
            raise ShapeMismatch(
                f"token array {tokens.shape} does not match grid {self.grid_w}x{self.grid_h}")
        if not np.all(np.isfinite(tokens)):
            raise ValueError("feature tokens must be finite")
        tokens.flags.writeable = False
        object.__setattr__(self, "tokens", tokens)

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    def with_tokens(self, tokens: np.ndarray) -> "FeatureMap":
        return FeatureMap(tokens, self.grid_w, self.grid_h, self.patch)

    def same_grid(self, other: "FeatureMap") -> bool:
        return (self.grid_w, self.grid_h) == (other.grid_w, other.grid_h)
