"""Shared value types for the response-map pipeline.

Everything here is immutable after construction (arrays are frozen via
``writeable=False``) and every operation is pure, so values can be shared
freely between worker threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .errors import ContractError, DimensionError

# Label value excluded from losses and evaluation (VOC convention).
IGNORE = 255

# Minimum side length of a split patch; smaller crops are below the
# classifier's useful receptive scale.
MIN_PATCH = 32


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ImageTensor:
    """RGB image as float32 in [0, 1], shape (H, W, 3)."""

    data: np.ndarray
    mean_color: Tuple[float, float, float] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3 or d.shape[2] != 3 or d.shape[0] < 1 or d.shape[1] < 1:
            raise DimensionError(f"image data must be (H, W, 3), got {d.shape}")
        if not np.isfinite(d).all() or d.min() < 0.0 or d.max() > 1.0:
            raise ContractError("image values must be finite and within [0, 1]")
        object.__setattr__(self, "data", _freeze(d))
        if self.mean_color is None:
            mc = tuple(float(m) for m in d.astype(np.float64).mean(axis=(0, 1)))
            object.__setattr__(self, "mean_color", mc)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def crop(self, rect: "Rect") -> "ImageTensor":
        if rect.top < 0 or rect.left < 0 or rect.bottom > self.height or rect.right > self.width:
            raise DimensionError(f"crop {rect} outside image {self.height}x{self.width}")
        return ImageTensor(self.data[rect.top:rect.bottom, rect.left:rect.right].copy())


@dataclass(frozen=True)
class FeatureStack:
    """Penultimate-layer unit activations, shape (K, h, w) float32."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3:
            raise DimensionError(f"feature stack must be (K, h, w), got {d.shape}")
        if not np.isfinite(d).all():
            raise ContractError("feature values must be finite")
        object.__setattr__(self, "data", _freeze(d))

    @property
    def units(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ClassWeights:
    """Final-layer weights over pooled units, shape (C, K) float32."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 2:
            raise DimensionError(f"class weights must be (C, K), got {d.shape}")
        if not np.isfinite(d).all():
            raise ContractError("weight values must be finite")
        object.__setattr__(self, "data", _freeze(d))

    @property
    def classes(self) -> int:
        return self.data.shape[0]

    @property
    def units(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ClassScores:
    """Per-class sigmoid probabilities, shape (C,)."""

    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float32)
        if p.ndim != 1:
            raise DimensionError(f"scores must be a vector, got {p.shape}")
        if not np.isfinite(p).all() or p.min() < 0.0 or p.max() > 1.0:
            raise ContractError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "probabilities", _freeze(p))

    def __len__(self) -> int:
        return int(self.probabilities.shape[0])


@dataclass(frozen=True)
class ResponseMap:
    """Per-class non-negative activation grid, shape (H, W) float32."""

    class_id: int
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 2 or d.shape[0] < 1 or d.shape[1] < 1:
            raise DimensionError(f"response map must be (H, W), got {d.shape}")
        if not np.isfinite(d).all():
            raise ContractError("response map values must be finite")
        if d.min() < 0.0:
            raise ContractError("response map values must be non-negative")
        if self.normalized:
            mx = float(d.max())
            if mx != 0.0 and abs(mx - 1.0) > 1e-6:
                raise ContractError(f"normalized map must peak at 1, got max {mx}")
        object.__setattr__(self, "data", _freeze(d))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SaliencyMap:
    """Class-agnostic saliency, shape (H, W) float64 in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise DimensionError(f"saliency map must be (H, W), got {d.shape}")
        if not np.isfinite(d).all() or d.min() < 0.0 or d.max() > 1.0:
            raise ContractError("saliency values must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(d))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class LabelMap:
    """Integer class-index grid; 0 = background, 1..C foreground, 255 = ignore."""

    data: np.ndarray
    num_classes: int = 20

    def __post_init__(self):
        d = np.asarray(self.data)
        if not np.issubdtype(d.dtype, np.integer):
            raise ContractError("label map must hold integers")
        d = d.astype(np.int32)
        if d.ndim != 2:
            raise DimensionError(f"label map must be (H, W), got {d.shape}")
        bad = (d < 0) | ((d > self.num_classes) & (d != IGNORE))
        if bad.any():
            offending = int(d[bad][0])
            raise ContractError(f"label index {offending} outside 0..{self.num_classes} and not {IGNORE}")
        object.__setattr__(self, "data", _freeze(d))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle, half-open: rows [top, top+height), cols [left, left+width)."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise DimensionError(f"rectangle must be non-empty, got {self}")

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    def contains(self, other: "Rect") -> bool:
        return (self.top <= other.top and self.left <= other.left
                and self.bottom >= other.bottom and self.right >= other.right)


@dataclass(frozen=True)
class SplitSpec:
    """Rectangles produced by the split-and-unite geometry.

    ``overlap`` is the retained central rectangle in two-class mode, None in
    the exact-tiling single-class mode.
    """

    patches: Tuple[Rect, ...]
    mode: str  # "single-class" | "two-class" | "multi-class"
    image_height: int
    image_width: int
    overlap: Optional[Rect] = None

    def __post_init__(self):
        if self.mode not in ("single-class", "two-class", "multi-class"):
            raise ContractError(f"unknown split mode {self.mode!r}")
        if len(self.patches) < 4:
            raise ContractError("a split needs at least four patches")
        cover = np.zeros((self.image_height, self.image_width), dtype=bool)
        for r in self.patches:
            if r.top < 0 or r.left < 0 or r.bottom > self.image_height or r.right > self.image_width:
                raise ContractError(f"patch {r} outside {self.image_height}x{self.image_width} image")
            if r.height < MIN_PATCH or r.width < MIN_PATCH:
                raise ContractError(f"patch {r} smaller than MIN_PATCH={MIN_PATCH}")
            cover[r.top:r.bottom, r.left:r.right] = True
        if not cover.all():
            raise ContractError("split patches do not cover the image")
        object.__setattr__(self, "patches", tuple(self.patches))


def resize_bilinear(m, out_h: int, out_w: int):
    """Corner-aligned bilinear resize.

    Accepts a ResponseMap, a SaliencyMap, or a bare (H, W) array and returns
    the same kind. Resizing never introduces values outside the input's
    [min, max] range (beyond float noise).
    """
    if isinstance(m, ResponseMap):
        out = _resize_array(m.data, out_h, out_w)
        np.maximum(out, 0.0, out=out)
        return ResponseMap(class_id=m.class_id, data=out.astype(np.float32), normalized=False)
    if isinstance(m, SaliencyMap):
        out = np.clip(_resize_array(m.data, out_h, out_w), 0.0, 1.0)
        return SaliencyMap(data=out)
    return _resize_array(m, out_h, out_w)


def _resize_array(map_data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"requested size {out_h}x{out_w} is empty")
    src = np.asarray(map_data, dtype=np.float64)
    in_h, in_w = src.shape
    if (in_h, in_w) == (out_h, out_w):
        return src.copy()

    def coords(n_out: int, n_in: int) -> np.ndarray:
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out, dtype=np.float64)
        return np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)

    ry = coords(out_h, in_h)
    rx = coords(out_w, in_w)
    y0 = np.minimum(np.floor(ry).astype(np.int64), in_h - 1)
    x0 = np.minimum(np.floor(rx).astype(np.int64), in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ry - y0)[:, None]
    fx = (rx - x0)[None, :]
    tl = src[np.ix_(y0, x0)]
    tr = src[np.ix_(y0, x1)]
    bl = src[np.ix_(y1, x0)]
    br = src[np.ix_(y1, x1)]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


def normalize(m: ResponseMap) -> ResponseMap:
    """Scale so the peak is exactly 1; an all-zero map is returned as-is."""
    if m.data.min() < 0.0:
        raise ContractError("normalize requires non-negative values")
    mx = float(m.data.max())
    if mx == 0.0:
        return replace(m, normalized=True)
    out = (m.data.astype(np.float64) / mx).astype(np.float32)
    return ResponseMap(class_id=m.class_id, data=out, normalized=True)


def image_from_array(arr: np.ndarray) -> ImageTensor:
    """Build an ImageTensor from a (H, W, 3) uint8 or float array."""
    a = np.asarray(arr)
    if np.issubdtype(a.dtype, np.integer):
        a = a.astype(np.float32) / 255.0
    return ImageTensor(data=a.astype(np.float32))
