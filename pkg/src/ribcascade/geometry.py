"""Boxes, binary masks and overlap metrics.

Coordinate convention used throughout the package: boxes are half-open
``[min, max)`` intervals with the origin at the top-left image corner,
``x`` indexing columns and ``y`` indexing rows. A pixel ``(x, y)`` covers the
unit square ``[x, x + 1) x [y, y + 1)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

MASK_THRESHOLD = 0.5
SOFT_MASK_SIZE = 28


@dataclass(frozen=True)
class PixelBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class NormalizedBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"non-finite box coordinates {coords}")
        if not (0.0 <= self.x_min < self.x_max <= 1.0 and 0.0 <= self.y_min < self.y_max <= 1.0):
            raise ValidationError(f"invalid normalized box {coords}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_cxcywh(self) -> tuple[float, float, float, float]:
        return (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
            self.x_max - self.x_min,
            self.y_max - self.y_min,
        )

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> "NormalizedBox":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def as_mask(m) -> np.ndarray:
    """Return ``m`` as a 2D boolean array."""
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ValidationError(f"mask must be 2D, got shape {arr.shape}")
    return arr.astype(bool, copy=False)


def dice_mask(a, b) -> float:
    """Dice overlap ``2|a & b| / (|a| + |b|)`` of two binary masks.

    Raises:
        ValidationError: on shape mismatch or when both masks are empty.
    """
    a = as_mask(a)
    b = as_mask(b)
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        raise ValidationError("dice of two empty masks is undefined")
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def intersection_area(a: PixelBox, b: PixelBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def dice_box(a: PixelBox, b: PixelBox) -> float:
    """Dice of two boxes treated as continuous areas."""
    return 2.0 * intersection_area(a, b) / (a.area + b.area)


def iou_box(a: PixelBox, b: PixelBox) -> float:
    inter = intersection_area(a, b)
    return inter / (a.area + b.area - inter)


def normalize_box(b: PixelBox, width: float, height: float, tol: float = 1e-9) -> NormalizedBox:
    if width <= 0 or height <= 0:
        raise ValidationError(f"image size must be positive, got {width}x{height}")
    if b.x_min < -tol or b.y_min < -tol or b.x_max > width + tol or b.y_max > height + tol:
        raise ValidationError(f"box {b.as_tuple()} outside image {width}x{height}")
    return NormalizedBox(
        min(max(b.x_min / width, 0.0), 1.0),
        min(max(b.y_min / height, 0.0), 1.0),
        min(max(b.x_max / width, 0.0), 1.0),
        min(max(b.y_max / height, 0.0), 1.0),
    )


def denormalize_box(b: NormalizedBox, width: float, height: float) -> PixelBox:
    return PixelBox(b.x_min * width, b.y_min * height, b.x_max * width, b.y_max * height)


def box_from_mask(m) -> PixelBox:
    """Tightest half-open box around the foreground of ``m``."""
    m = as_mask(m)
    rows = np.flatnonzero(m.any(axis=1))
    if rows.size == 0:
        raise ValidationError("cannot take the box of an empty mask")
    cols = np.flatnonzero(m.any(axis=0))
    return PixelBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def box_to_mask(b: PixelBox, shape: tuple[int, int]) -> np.ndarray:
    """Rasterize a box: a pixel is inside when its center is inside the box."""
    h, w = shape
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    inx = (xs >= b.x_min) & (xs < b.x_max)
    iny = (ys >= b.y_min) & (ys < b.y_max)
    return iny[:, None] & inx[None, :]


def clip_box(b: PixelBox, shape: tuple[int, int]) -> PixelBox | None:
    """Clip ``b`` to an image of ``shape``; None when nothing is left."""
    h, w = shape
    x0, y0 = max(b.x_min, 0.0), max(b.y_min, 0.0)
    x1, y1 = min(b.x_max, float(w)), min(b.y_max, float(h))
    if x0 >= x1 or y0 >= y1:
        return None
    return PixelBox(x0, y0, x1, y1)


def bilinear_sample(grid: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample ``grid`` at continuous (column ``u``, row ``v``) cell coordinates.

    Cell ``(j, i)`` has its center at ``u = j, v = i``; coordinates outside the
    grid are clamped to the border.
    """
    n_rows, n_cols = grid.shape
    u = np.clip(u, 0.0, n_cols - 1)
    v = np.clip(v, 0.0, n_rows - 1)
    j0 = np.minimum(np.floor(u).astype(int), n_cols - 1)
    i0 = np.minimum(np.floor(v).astype(int), n_rows - 1)
    j1 = np.minimum(j0 + 1, n_cols - 1)
    i1 = np.minimum(i0 + 1, n_rows - 1)
    fu = u - j0
    fv = v - i0
    return (
        grid[i0, j0] * (1 - fu) * (1 - fv)
        + grid[i0, j1] * fu * (1 - fv)
        + grid[i1, j0] * (1 - fu) * fv
        + grid[i1, j1] * fu * fv
    )


def paste_mask(soft, box: PixelBox, image_shape: tuple[int, int]) -> np.ndarray:
    """Project a square soft mask into image space.

    The soft mask is bilinearly resized onto the box extent (pixel centers
    inside the box), thresholded at 0.5 (ties count as foreground) and left
    zero elsewhere. A box reaching outside the image is clipped with a warning.
    """
    soft = np.asarray(soft, dtype=np.float64)
    if soft.ndim != 2 or soft.shape[0] != soft.shape[1]:
        raise ValidationError(f"soft mask must be square 2D, got {soft.shape}")
    h, w = image_shape
    out = np.zeros((h, w), dtype=bool)
    clipped = clip_box(box, image_shape)
    if clipped is None:
        warnings.warn(f"box {box.as_tuple()} lies outside image {image_shape}; empty mask")
        return out
    if clipped != box:
        warnings.warn(f"box {box.as_tuple()} clipped to image {image_shape}")
    n = soft.shape[0]
    x0 = int(math.ceil(clipped.x_min - 0.5))
    x1 = int(math.ceil(clipped.x_max - 0.5))
    y0 = int(math.ceil(clipped.y_min - 0.5))
    y1 = int(math.ceil(clipped.y_max - 0.5))
    if x0 >= x1 or y0 >= y1:
        return out
    # cell coordinates are computed against the unclipped box
    u = (np.arange(x0, x1) + 0.5 - box.x_min) / box.width * n - 0.5
    v = (np.arange(y0, y1) + 0.5 - box.y_min) / box.height * n - 0.5
    uu, vv = np.meshgrid(u, v)
    out[y0:y1, x0:x1] = bilinear_sample(soft, uu, vv) >= MASK_THRESHOLD
    return out
