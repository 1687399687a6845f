"""Box and grid arithmetic shared by every tracking stage.

Coordinate convention used throughout the package: continuous image
coordinates, with pixel ``(row i, col j)`` covering ``[j, j+1) x [i, i+1)``
and its sample sitting at ``(j + 0.5, i + 0.5)``.  Boxes live in the same
continuous frame, so a box ``(0, 0, W, H)`` covers an image exactly.

Images are plain ``numpy`` arrays of shape ``(H, W)`` or ``(H, W, C)``
holding samples in ``[0, 1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "BBox",
    "Point2",
    "iou",
    "giou",
    "expand_box",
    "clamp_box",
    "min_max_enclose",
    "bilinear_sample",
    "crop_resample",
    "to_gray",
    "box_to_patch",
    "box_from_patch",
    "points_to_patch",
    "points_from_patch",
]


@dataclass(frozen=True)
class Point2:
    u: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ValueError("point coordinates must be finite")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box ``(x, y, w, h)`` in continuous pixel coordinates."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError(f"box fields must be finite: {vals}")
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive extent: {vals}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls(float(x1), float(y1), float(x2 - x1), float(y2 - y1))

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> Point2:
        return Point2(self.x + 0.5 * self.w, self.y + 0.5 * self.h)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x2, self.y2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def translated(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x + dx, self.y + dy, self.w, self.h)

    def inside(self, width: float, height: float) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height


def _intersection(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BBox, b: BBox) -> float:
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    return min(inter / union, 1.0)


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU: IoU minus the share of the enclosing box not covered by the union."""
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    enclosing = (max(a.x2, b.x2) - min(a.x, b.x)) * (max(a.y2, b.y2) - min(a.y, b.y))
    return min(inter / union, 1.0) - (enclosing - union) / enclosing


def _fit_interval(lo: float, size: float, limit: float) -> tuple[float, float]:
    # translate into [0, limit]; clip only when the interval is longer than the frame
    if size >= limit:
        return 0.0, float(limit)
    if lo < 0:
        lo = 0.0
    elif lo + size > limit:
        lo = limit - size
    return lo, size


def expand_box(b: BBox, factor: float, bounds: tuple[float, float]) -> BBox:
    """Scale ``b`` about its center by ``factor`` and move it inside ``bounds = (width, height)``.

    Near a border the expanded box is translated back into the frame rather
    than shrunk, so the search region keeps its size; it is clipped only when
    it is larger than the frame itself.
    """
    if factor <= 0:
        raise ValueError("factor must be positive")
    width, height = bounds
    if width <= 0 or height <= 0:
        raise ValueError("bounds must be positive")
    w, h = b.w * factor, b.h * factor
    # grow each side by half the extra extent; factor 1 reproduces b exactly
    x, w = _fit_interval(b.x - 0.5 * (factor - 1.0) * b.w, w, width)
    y, h = _fit_interval(b.y - 0.5 * (factor - 1.0) * b.h, h, height)
    return BBox(x, y, w, h)


def clamp_box(b: BBox, bounds: tuple[float, float], min_size: float = 1.0) -> BBox:
    """Translate ``b`` inside ``bounds`` (clipping oversize boxes) and floor its extent."""
    width, height = bounds
    w = min(max(b.w, min_size), width)
    h = min(max(b.h, min_size), height)
    x = min(max(b.x, 0.0), width - w)
    y = min(max(b.y, 0.0), height - h)
    return BBox(x, y, w, h)


def min_max_enclose(points: Iterable[Point2] | np.ndarray) -> BBox:
    """Smallest axis-aligned box containing ``points``, floored at 1x1 px.

    Accepts a sequence of :class:`Point2` or an ``(N, 2)`` array of ``(u, v)``.
    """
    if isinstance(points, np.ndarray):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    else:
        pts = np.array([(p.u, p.v) for p in points], dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("no points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    x1, y1 = pts.min(axis=0)
    x2, y2 = pts.max(axis=0)
    return BBox(float(x1), float(y1), max(float(x2 - x1), 1.0), max(float(y2 - y1), 1.0))


def bilinear_sample(arr: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``arr`` at fractional *index* coordinates with border replication.

    ``arr`` is ``(H, W)`` or ``(H, W, ...)``; ``x`` (column) and ``y`` (row)
    broadcast together and the result has shape ``x.shape + arr.shape[2:]``.
    """
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[:2]
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, w - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1)
    x, y = np.broadcast_arrays(x, y)
    coords = np.stack([y.ravel(), x.ravel()])
    tail = arr.shape[2:]
    planes = arr.reshape(h, w, -1)
    out = np.empty((x.size, planes.shape[2]))
    for c in range(planes.shape[2]):
        out[:, c] = ndimage.map_coordinates(planes[..., c], coords, order=1, mode="nearest")
    return out.reshape(x.shape + tail)


def crop_resample(img: np.ndarray, b: BBox, out_w: int, out_h: int) -> np.ndarray:
    """Bilinearly resample the region ``b`` of ``img`` onto an ``out_h x out_w`` grid."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be at least 1x1")
    xs = b.x + (np.arange(out_w) + 0.5) * (b.w / out_w) - 0.5
    ys = b.y + (np.arange(out_h) + 0.5) * (b.h / out_h) - 0.5
    return bilinear_sample(np.asarray(img, dtype=np.float64), xs[None, :], ys[:, None])


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    if img.ndim == 3 and img.shape[2] >= 3:
        return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    raise ValueError(f"unsupported image shape {img.shape}")


# Mapping between frame coordinates and a patch resampled from region ``region``
# onto an ``size = (out_w, out_h)`` grid.  Both are affine and exact inverses.

def points_to_patch(pts: np.ndarray, region: BBox, size: tuple[int, int]) -> np.ndarray:
    sx, sy = size[0] / region.w, size[1] / region.h
    pts = np.asarray(pts, dtype=np.float64)
    return np.stack([(pts[..., 0] - region.x) * sx, (pts[..., 1] - region.y) * sy], axis=-1)


def points_from_patch(pts: np.ndarray, region: BBox, size: tuple[int, int]) -> np.ndarray:
    sx, sy = region.w / size[0], region.h / size[1]
    pts = np.asarray(pts, dtype=np.float64)
    return np.stack([pts[..., 0] * sx + region.x, pts[..., 1] * sy + region.y], axis=-1)


def box_to_patch(b: BBox, region: BBox, size: tuple[int, int]) -> BBox:
    sx, sy = size[0] / region.w, size[1] / region.h
    return BBox((b.x - region.x) * sx, (b.y - region.y) * sy, b.w * sx, b.h * sy)


def box_from_patch(b: BBox, region: BBox, size: tuple[int, int]) -> BBox:
    sx, sy = region.w / size[0], region.h / size[1]
    return BBox(b.x * sx + region.x, b.y * sy + region.y, b.w * sx, b.h * sy)


def boxes_array(boxes: Sequence[BBox]) -> np.ndarray:
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)
