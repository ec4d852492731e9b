"""Image buffer, PNM file I/O and the filtering primitives used by every stage."""
import math
import os
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import ndimage

from nightstereo.errors import (
    IoFailure,
    MalformedHeader,
    NonPositiveSigma,
    ShapeMismatch,
    TruncatedData,
    UnsupportedMaxval,
    ZeroDimension,
)

# ITU-R 601 luma
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
PSNR_CAP_DB = 99.0

PathLike = Union[str, os.PathLike]


@dataclass(frozen=True, eq=False)
class ImageBuf:
    """Float image in [0, 1] stored as an (height, width, channels) array.

    The array is made read-only on construction so a buffer can be handed to
    another worker without copying.
    """
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ShapeMismatch(f"image must be HxWx1 or HxWx3, got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ZeroDimension(f"image has zero extent: {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("image samples must be finite and within [0, 1]")
        if data.flags.writeable or data.base is not None:
            data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "ImageBuf":
        """Build an image from arbitrary floats, clipping into [0, 1]."""
        array = np.nan_to_num(np.asarray(array, dtype=np.float64), nan=0.0)
        return cls(np.clip(array, 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def plane(self) -> np.ndarray:
        """(H, W) view of a single-channel image."""
        if self.channels != 1:
            raise ShapeMismatch("plane is only defined for single-channel images")
        return self.data[:, :, 0]

    @property
    def shape(self):
        return self.data.shape


# ---------------------------------------------------------------------------
# PNM I/O
# ---------------------------------------------------------------------------

_WHITESPACE = b" \t\r\n\v\f"


def _read_header_token(raw: bytes, pos: int):
    """Return (token, start, end) skipping whitespace and '#' comments."""
    n = len(raw)
    while pos < n:
        ch = raw[pos:pos + 1]
        if ch in (b"#",):
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch and ch in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < n and raw[pos:pos + 1] not in _WHITESPACE and raw[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise MalformedHeader("unexpected end of header", start)
    token = raw[start:pos]
    if not token.isdigit():
        raise MalformedHeader(f"expected a decimal number, got {token[:16]!r}", start)
    return int(token), start, pos


def _parse_pnm(raw: bytes):
    """Return (integer sample codes as HxWxC, maxval)."""
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise MalformedHeader(f"unsupported magic {magic!r}", 0)
    channels = 1 if magic == b"P5" else 3

    width, w_start, pos = _read_header_token(raw, 2)
    height, h_start, pos = _read_header_token(raw, pos)
    maxval, m_start, pos = _read_header_token(raw, pos)
    if width == 0:
        raise MalformedHeader("width is zero", w_start)
    if height == 0:
        raise MalformedHeader("height is zero", h_start)
    if maxval not in (255, 65535):
        raise UnsupportedMaxval(f"maxval {maxval} not in (255, 65535)", m_start)
    if pos >= len(raw) or raw[pos:pos + 1] not in _WHITESPACE:
        raise MalformedHeader("missing whitespace after maxval", pos)
    data_start = pos + 1

    dtype = np.dtype(np.uint8) if maxval == 255 else np.dtype(">u2")
    expected = width * height * channels * dtype.itemsize
    available = len(raw) - data_start
    if available < expected:
        raise TruncatedData(
            f"expected {expected} data bytes from offset {data_start}, file ends early",
            len(raw),
        )
    samples = np.frombuffer(raw, dtype=dtype, count=width * height * channels, offset=data_start)
    return samples.reshape(height, width, channels), maxval


def decode_pnm(raw: bytes) -> ImageBuf:
    """Decode a binary P5/P6 byte string."""
    codes, maxval = _parse_pnm(raw)
    return ImageBuf(codes.astype(np.float64) / maxval)


def _read_file(path: PathLike) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise IoFailure(path, e.strerror) from e


def load_pnm(path: PathLike) -> ImageBuf:
    """Load a binary PGM (P5) or PPM (P6) file, 8 or 16 bit."""
    return decode_pnm(_read_file(path))


def quantize(data: np.ndarray, bitdepth: int = 8) -> np.ndarray:
    """Round-half-up quantization of [0, 1] samples to integer codes."""
    maxval = (1 << bitdepth) - 1
    codes = np.floor(np.asarray(data, dtype=np.float64) * maxval + 0.5)
    return np.clip(codes, 0, maxval).astype(np.uint16 if bitdepth == 16 else np.uint8)


def encode_pnm(img: ImageBuf, bitdepth: int = 8) -> bytes:
    if bitdepth not in (8, 16):
        raise ValueError(f"bitdepth must be 8 or 16, got {bitdepth}")
    magic = "P5" if img.channels == 1 else "P6"
    maxval = (1 << bitdepth) - 1
    codes = quantize(img.data, bitdepth)
    if bitdepth == 16:
        payload = codes.astype(">u2").tobytes()
    else:
        payload = codes.tobytes()
    header = f"{magic}\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
    return header + payload


def save_pnm(img: ImageBuf, path: PathLike, bitdepth: int = 8) -> None:
    """Write `img` as P5/P6; no comments are emitted."""
    raw = encode_pnm(img, bitdepth)
    try:
        with open(path, "wb") as f:
            f.write(raw)
    except OSError as e:
        raise IoFailure(path, e.strerror) from e


def save_codes_pgm(codes: np.ndarray, path: PathLike) -> None:
    """Write an integer (H, W) array verbatim as an 8- or 16-bit PGM."""
    codes = np.asarray(codes)
    bitdepth = 16 if codes.dtype.itemsize > 1 else 8
    maxval = (1 << bitdepth) - 1
    payload = codes.astype(">u2" if bitdepth == 16 else np.uint8).tobytes()
    header = f"P5\n{codes.shape[1]} {codes.shape[0]}\n{maxval}\n".encode("ascii")
    try:
        with open(path, "wb") as f:
            f.write(header + payload)
    except OSError as e:
        raise IoFailure(path, e.strerror) from e


def load_codes_pgm(path: PathLike) -> np.ndarray:
    """Read a PGM back as its (H, W) integer sample codes."""
    codes, maxval = _parse_pnm(_read_file(path))
    if codes.shape[2] != 1:
        raise ShapeMismatch(f"{path} is not a single-channel PGM")
    return codes[:, :, 0].astype(np.uint16 if maxval == 65535 else np.uint8)


# ---------------------------------------------------------------------------
# colour, resampling, filtering
# ---------------------------------------------------------------------------

def to_grayscale(img: ImageBuf) -> ImageBuf:
    if img.channels == 1:
        return img
    gray = img.data @ LUMA_WEIGHTS
    return ImageBuf(np.clip(gray, 0.0, 1.0)[:, :, None])


def resample_bilinear(array: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resampling of an (H, W) or (H, W, C) float array.

    Half-pixel-centre mapping with clamp-to-edge; values are not clipped, so
    this also serves non-image grids such as gain maps.
    """
    if width < 1 or height < 1:
        raise ZeroDimension(f"target size {width}x{height}")
    array = np.asarray(array, dtype=np.float64)
    src_h, src_w = array.shape[:2]
    ys = (np.arange(height) + 0.5) * (src_h / height) - 0.5
    xs = (np.arange(width) + 0.5) * (src_w / width) - 0.5
    ys = np.clip(ys, 0.0, src_h - 1)
    xs = np.clip(xs, 0.0, src_w - 1)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    coords = np.stack([grid_y, grid_x])
    if array.ndim == 2:
        return ndimage.map_coordinates(array, coords, order=1, mode="nearest")
    out = np.empty((height, width, array.shape[2]))
    for c in range(array.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(array[:, :, c], coords, order=1, mode="nearest")
    return out


def resize_bilinear(img: ImageBuf, w: int, h: int) -> ImageBuf:
    if w < 1 or h < 1:
        raise ZeroDimension(f"target size {w}x{h}")
    if (w, h) == (img.width, img.height):
        return img
    return ImageBuf.from_array(resample_bilinear(img.data, w, h))


def box_filter_plane(plane: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return np.asarray(plane, dtype=np.float64)
    return ndimage.uniform_filter(np.asarray(plane, dtype=np.float64), size=2 * radius + 1, mode="nearest")


def box_blur(img: ImageBuf, radius: int) -> ImageBuf:
    """(2r+1)^2 mean filter, clamp-to-edge."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return img
    size = (2 * radius + 1, 2 * radius + 1, 1)
    out = ndimage.uniform_filter(img.data, size=size, mode="nearest")
    return ImageBuf.from_array(out)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at ceil(3 sigma), normalized to sum 1."""
    if sigma <= 0:
        raise NonPositiveSigma(f"sigma must be > 0, got {sigma}")
    half = int(math.ceil(3.0 * sigma))
    x = np.arange(-half, half + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_filter_plane(plane: np.ndarray, sigma: float) -> np.ndarray:
    kernel = gaussian_kernel(sigma)
    out = ndimage.correlate1d(np.asarray(plane, dtype=np.float64), kernel, axis=0, mode="nearest")
    return ndimage.correlate1d(out, kernel, axis=1, mode="nearest")


def gaussian_blur(img: ImageBuf, sigma: float) -> ImageBuf:
    kernel = gaussian_kernel(sigma)
    out = ndimage.correlate1d(img.data, kernel, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="nearest")
    return ImageBuf.from_array(out)


def psnr(a: ImageBuf, b: ImageBuf) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical images."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"psnr of {a.shape} vs {b.shape}")
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))
