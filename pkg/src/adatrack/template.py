"""Adaptive template: flow-accumulated warping of the first patch and feature fusion.

The template keeps the original patch ``p0`` forever.  What changes from frame
to frame is the accumulated flow ``g`` of the template's cell centers; the
part of ``g`` explained by a global shift and isotropic zoom is divided out,
and only the residual (rotation, local deformation) is used to re-warp ``p0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import STRIDE, encode
from .flow import FlowField, _upsample_cells, grid_coords
from .geometry import Point2, bilinear_sample

__all__ = [
    "TemplateState",
    "TEMPLATE_SIZE",
    "grid_points",
    "scale_ratio",
    "residual_flow",
    "warp_template",
    "fuse_features",
    "resize_confidence",
    "resize_occlusion",
    "encode_inner",
    "CONTEXT_MARGIN",
]

TEMPLATE_SIZE = 64  # px, square
# image context kept around the template so that its border cells are encoded
# from real neighbors, exactly as the same cells are inside a larger search map
CONTEXT_MARGIN = 16  # px, a multiple of the feature stride


def grid_points(shape: tuple[int, int], spacing: float = STRIDE) -> np.ndarray:
    """Continuous coordinates of the grid nodes of a field with ``shape`` cells."""
    xx, yy = grid_coords(*shape)
    return np.stack([(xx + 0.5) * spacing, (yy + 0.5) * spacing], axis=-1)


def encode_inner(patch: np.ndarray, channels: int = 32, margin: int = 0) -> np.ndarray:
    """Encode ``patch`` and drop the cells of its ``margin``-pixel context border."""
    if margin % STRIDE or margin < 0:
        raise ValueError(f"margin must be a non-negative multiple of {STRIDE}")
    f = encode(patch, channels)
    k = margin // STRIDE
    return f[k:f.shape[0] - k, k:f.shape[1] - k] if k else f


@dataclass
class TemplateState:
    """Original patch, its features and the flow accumulated on its cell grid.

    ``p0`` may carry ``margin`` pixels of surrounding image on every side; the
    template proper, its features ``f0`` and the grid of ``g`` cover only the
    inner part.  Template pixel coordinates are measured from the inner origin.
    """

    p0: np.ndarray
    f0: np.ndarray
    g: FlowField  # per template cell, in template pixels
    center: Point2
    scale: float = 1.0
    margin: int = 0

    def __post_init__(self):
        if self.g.shape != self.f0.shape[:2]:
            raise ValueError("accumulated flow must live on the template feature grid")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        h, w = self.p0.shape[:2]
        if (h - 2 * self.margin, w - 2 * self.margin) != (self.f0.shape[0] * STRIDE, self.f0.shape[1] * STRIDE):
            raise ValueError("template patch does not match its feature grid")

    @property
    def inner_shape(self) -> tuple[int, int]:
        return self.f0.shape[0] * STRIDE, self.f0.shape[1] * STRIDE

    @classmethod
    def from_patch(cls, p0: np.ndarray, channels: int = 32, margin: int = 0) -> "TemplateState":
        p0 = np.asarray(p0, dtype=np.float64)
        f0 = encode_inner(p0, channels, margin)
        h, w = f0.shape[0] * STRIDE, f0.shape[1] * STRIDE
        return cls(p0, f0, FlowField.zeros(*f0.shape[:2]), Point2(w / 2.0, h / 2.0), 1.0, margin)

    def reset_flow(self) -> None:
        self.g = FlowField.zeros(*self.f0.shape[:2])
        self.scale = 1.0


def _centered(g: FlowField, center: Point2, spacing: float):
    x0 = grid_points(g.shape, spacing)
    c0 = np.array([center.u, center.v])
    rel0 = x0 - c0
    dist0 = np.hypot(rel0[..., 0], rel0[..., 1])
    use = g.valid & (dist0 > 1e-12)
    return x0, c0, rel0, dist0, use


def scale_ratio(g: FlowField, center: Point2, spacing: float = STRIDE) -> float:
    """Mean ratio of each node's distance to the moved centroid over its original distance to ``center``."""
    x0, c0, _, dist0, use = _centered(g, center, spacing)
    if not use.any():
        raise ValueError("degenerate grid")
    cy = c0 + g.uv[use].mean(axis=0)
    moved = x0 + g.uv - cy
    return float(np.mean(np.hypot(moved[..., 0], moved[..., 1])[use] / dist0[use]))


def residual_flow(g: FlowField, center: Point2, scale: float, spacing: float = STRIDE) -> np.ndarray:
    """Per-node displacement left after removing the mean shift and dividing out ``scale``."""
    x0, c0, rel0, _, use = _centered(g, center, spacing)
    if not use.any():
        raise ValueError("degenerate grid")
    cy = c0 + g.uv[use].mean(axis=0)
    r = (x0 + g.uv - cy) / scale - rel0
    return np.where(g.valid[..., None], r, 0.0)


def warp_template(state: TemplateState) -> np.ndarray:
    """Pull ``p0`` back along the similarity-free residual of the accumulated flow.

    The result has the shape of ``p0``, context border included; the residual
    is extrapolated linearly into the border.
    """
    h, w = state.p0.shape[:2]
    r_cells = residual_flow(state.g, state.center, state.scale, spacing=STRIDE)
    r = _upsample_cells(r_cells, h, w, state.margin)
    xx, yy = grid_coords(h, w)
    return bilinear_sample(state.p0, xx - r[..., 0], yy - r[..., 1])


def resize_confidence(u: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Area-consistent bilinear resize of a confidence map to ``shape``."""
    u = np.asarray(u, dtype=np.float64)
    h, w = u.shape
    ys = (np.arange(shape[0]) + 0.5) * (h / shape[0]) - 0.5
    xs = (np.arange(shape[1]) + 0.5) * (w / shape[1]) - 0.5
    return np.clip(bilinear_sample(u, xs[None, :], ys[:, None]), 0.0, 1.0)


def resize_occlusion(o: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of a boolean occlusion map to ``shape``."""
    o = np.asarray(o, dtype=bool)
    h, w = o.shape
    ys = np.minimum(((np.arange(shape[0]) + 0.5) * (h / shape[0])).astype(np.intp), h - 1)
    xs = np.minimum(((np.arange(shape[1]) + 0.5) * (w / shape[1])).astype(np.intp), w - 1)
    return o[ys][:, xs]


def fuse_features(f_warped: np.ndarray, f_prev_roi: np.ndarray, u: np.ndarray, o: np.ndarray,
                  alpha: float, normalize: bool = True) -> np.ndarray:
    """Blend warped-template features with previous-target features gated by confidence and occlusion.

    ``u`` and ``o`` must already be at feature resolution.  Occluded cells of
    ``f_prev_roi`` are dropped, the rest are scaled by their confidence, and
    the result is mixed with ``f_warped`` by ``alpha``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    f_warped = np.asarray(f_warped, dtype=np.float64)
    f_prev_roi = np.asarray(f_prev_roi, dtype=np.float64)
    if f_warped.shape != f_prev_roi.shape:
        raise ValueError(f"feature extents differ: {f_warped.shape} vs {f_prev_roi.shape}")
    if np.shape(u) != f_warped.shape[:2] or np.shape(o) != f_warped.shape[:2]:
        raise ValueError("confidence/occlusion maps must match the feature extent")
    keep = (~np.asarray(o, dtype=bool)).astype(np.float64)
    # zero out occluded cells explicitly so whatever they hold cannot leak through
    f_occ = np.where(keep[..., None] > 0, f_prev_roi, 0.0)
    f_conf = np.asarray(u, dtype=np.float64)[..., None] * f_occ
    fused = alpha * f_warped + (1.0 - alpha) * f_conf
    if not normalize:
        return fused
    norm = np.sqrt(np.sum(fused * fused, axis=-1, keepdims=True))
    return np.where(norm > 1e-8, fused / np.where(norm > 1e-8, norm, 1.0), 0.0)
