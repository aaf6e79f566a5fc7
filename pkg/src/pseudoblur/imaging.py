"""Image containers, luma, filtering, resampling and full-reference metrics.

Images are H x W x C float32 arrays. Networks work in the signed range
[-1, 1]; luma, metrics and PNG files use the unit range [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import InvalidInputError

SIGNED = "signed"
UNIT = "unit"
_RANGES = {SIGNED: (-1.0, 1.0), UNIT: (0.0, 1.0)}

# BT.601 luma weights on unit-range RGB.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

PSNR_CAP = 99.0


@dataclass(frozen=True, eq=False)
class ImageTensor:
    data: np.ndarray
    range_tag: str = UNIT

    def __post_init__(self):
        if self.range_tag not in _RANGES:
            raise InvalidInputError(f"unknown range tag {self.range_tag!r}")
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidInputError(f"expected H x W x {{1,3}} image, got shape {arr.shape}")
        lo, hi = _RANGES[self.range_tag]
        arr = np.clip(arr, lo, hi)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_unit(self) -> "ImageTensor":
        if self.range_tag == UNIT:
            return self
        return ImageTensor((self.data + 1.0) / 2.0, UNIT)

    def to_signed(self) -> "ImageTensor":
        if self.range_tag == SIGNED:
            return self
        return ImageTensor(self.data * 2.0 - 1.0, SIGNED)

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.range_tag == other.range_tag and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BinaryMask:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise InvalidInputError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        elif not np.all((arr == 0) | (arr == 1)):
            raise InvalidInputError("mask values must be exactly 0 or 1")
        arr = arr.astype(np.uint8)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, shape: tuple[int, int]) -> "BinaryMask":
        return cls(np.zeros(shape, dtype=np.uint8))

    @classmethod
    def ones(cls, shape: tuple[int, int]) -> "BinaryMask":
        return cls(np.ones(shape, dtype=np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def invert(self) -> "BinaryMask":
        return BinaryMask(1 - self.data)

    def __or__(self, other: "BinaryMask") -> "BinaryMask":
        return BinaryMask(self.data | other.data)

    def __and__(self, other: "BinaryMask") -> "BinaryMask":
        return BinaryMask(self.data & other.data)

    def apply(self, img: ImageTensor) -> ImageTensor:
        """Elementwise ``mask * img`` (zeros outside the region)."""
        if img.shape[:2] != self.shape:
            raise InvalidInputError(f"mask {self.shape} does not match image {img.shape}")
        return ImageTensor(img.data * self.data[:, :, None].astype(np.float32), img.range_tag)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    __hash__ = None


def rgb_to_y(img: ImageTensor) -> ImageTensor:
    if img.channels != 3:
        raise InvalidInputError(f"rgb_to_y needs 3 channels, got {img.channels}")
    if img.range_tag != UNIT:
        raise InvalidInputError("rgb_to_y expects a unit-range image; call to_unit() first")
    w = np.asarray(LUMA_WEIGHTS, dtype=np.float32)
    return ImageTensor(img.data @ w, UNIT)


def _as_map(x) -> np.ndarray:
    if isinstance(x, ImageTensor):
        if x.channels != 1:
            raise InvalidInputError(f"expected a single-channel image, got {x.channels} channels")
        return x.data[:, :, 0]
    arr = np.asarray(x)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise InvalidInputError(f"expected a 2-D map, got shape {arr.shape}")
    return arr


def sobel_edges(img) -> np.ndarray:
    """Sobel gradient magnitude of a single-channel image, replicate border.

    Returns a float32 H x W map. Values are unbounded above (up to
    ``4 * sqrt(2)`` for unit-range input), so the result is a plain array
    rather than a range-tagged image.
    """
    m = _as_map(img).astype(np.float64)
    h, w = m.shape
    p = np.pad(m, 1, mode="edge")
    # differences first so constant regions cancel exactly
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = dx[0:h] + 2.0 * dx[1:h + 1] + dx[2:h + 2]
    gy = dy[:, 0:w] + 2.0 * dy[:, 1:w + 1] + dy[:, 2:w + 2]
    return np.sqrt(gx * gx + gy * gy).astype(np.float32)


def max_pool(img, kernel: int, stride: int = 1) -> np.ndarray:
    """Same-padded max pooling of a 2-D map.

    Padding uses -inf so border windows only see in-image pixels. With
    ``stride=1`` the output shape equals the input shape.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise InvalidInputError(f"max_pool kernel must be odd and >= 1, got {kernel}")
    if stride < 1:
        raise InvalidInputError(f"stride must be >= 1, got {stride}")
    m = _as_map(img)
    if kernel == 1:
        return m[::stride, ::stride].copy()
    r = kernel // 2
    fill = -np.inf if np.issubdtype(m.dtype, np.floating) else np.iinfo(m.dtype).min
    padded = np.pad(m, r, mode="constant", constant_values=fill)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel))
    return windows.max(axis=(2, 3))[::stride, ::stride].astype(m.dtype)


def downsample_2x(img: ImageTensor) -> ImageTensor:
    h, w = img.height, img.width
    if h % 2 or w % 2:
        raise InvalidInputError(f"downsample_2x needs even dimensions, got {h}x{w}")
    d = img.data.astype(np.float64)
    out = 0.25 * (d[0::2, 0::2] + d[1::2, 0::2] + d[0::2, 1::2] + d[1::2, 1::2])
    return ImageTensor(out, img.range_tag)


def average_frames(frames: Sequence[ImageTensor]) -> ImageTensor:
    """Elementwise mean of frames, accumulated in float64 in list order."""
    if len(frames) < 2:
        raise InvalidInputError(f"need at least 2 frames, got {len(frames)}")
    first = frames[0]
    for f in frames[1:]:
        if f.shape != first.shape or f.range_tag != first.range_tag:
            raise InvalidInputError("frames must share shape and range tag")
    acc = np.zeros(first.shape, dtype=np.float64)
    for f in frames:
        acc += f.data
    return ImageTensor(acc / len(frames), first.range_tag)


def _pair_unit(a: ImageTensor, b: ImageTensor) -> tuple[np.ndarray, np.ndarray]:
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a.to_unit().data.astype(np.float64), b.to_unit().data.astype(np.float64)


def psnr(a: ImageTensor, b: ImageTensor) -> float:
    """PSNR in dB on unit range; identical images return ``PSNR_CAP``."""
    x, y = _pair_unit(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(x, win.shape)
    return np.einsum("ijkl,kl->ij", windows, win)


def ssim(a: ImageTensor, b: ImageTensor, *, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM, Gaussian window, valid filtering, dynamic range 1.

    Multi-channel images are scored per channel and averaged.
    """
    x, y = _pair_unit(a, b)
    if x.shape[0] < win_size or x.shape[1] < win_size:
        raise InvalidInputError(f"image {x.shape[:2]} smaller than {win_size}x{win_size} window")
    win = gaussian_window(win_size, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    scores = []
    for c in range(x.shape[2]):
        xc, yc = x[:, :, c], y[:, :, c]
        mx, my = _filter_valid(xc, win), _filter_valid(yc, win)
        sxx = _filter_valid(xc * xc, win) - mx * mx
        syy = _filter_valid(yc * yc, win) - my * my
        sxy = _filter_valid(xc * yc, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def _check_box(shape: tuple[int, ...], box: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
    top, left, bottom, right = (int(v) for v in box)
    h, w = shape[0], shape[1]
    if not (0 <= top < bottom <= h and 0 <= left < right <= w):
        raise InvalidInputError(f"box {box} invalid for image {h}x{w}")
    return top, left, bottom, right


def crop_bbox(img: ImageTensor, box: tuple[int, int, int, int]) -> ImageTensor:
    """Crop to ``(top, left, bottom, right)``, bottom/right exclusive."""
    top, left, bottom, right = _check_box(img.shape, box)
    return ImageTensor(img.data[top:bottom, left:right], img.range_tag)


def zero_outside_bbox(mask: BinaryMask, box: tuple[int, int, int, int]) -> BinaryMask:
    top, left, bottom, right = _check_box(mask.shape, box)
    out = np.zeros_like(mask.data)
    out[top:bottom, left:right] = mask.data[top:bottom, left:right]
    return BinaryMask(out)


def read_png(path: str | Path) -> ImageTensor:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return ImageTensor(arr, UNIT)


def write_png(img: ImageTensor, path: str | Path) -> None:
    arr = np.round(img.to_unit().data * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")
