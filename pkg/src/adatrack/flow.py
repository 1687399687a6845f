"""Dense optical flow on top of an all-pairs correlation volume.

The estimator works coarse-to-fine over a 2x image pyramid.  At every level
both images are encoded into stride-8 descriptors, a 4-D correlation volume
is built and averaged over a 5x5-cell support, and the per-cell flow is
refined by repeatedly looking up a ``(2r+1)^2`` correlation neighborhood
around the current estimate, moving to its soft-argmax and smoothing with a
weighted median.  Each level closes with a few Lucas-Kanade steps on
band-passed intensities, which take the cell flow to sub-pixel precision;
the finest cell flow is upsampled bilinearly to pixels.

Flow fields are indexed like images: ``uv[i, j] = (u, v)`` is the
displacement of the pixel in row ``i``, column ``j``; positive ``u`` points
right, positive ``v`` down.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .features import STRIDE, encode
from .geometry import BBox, bilinear_sample, to_gray

__all__ = [
    "FlowField",
    "CostVolume",
    "FlowPair",
    "FlowEstimator",
    "CorrelationFlow",
    "build_cost_volume",
    "estimate_flow",
    "compose_flow",
    "fb_occlusion",
    "occlusion_fraction",
    "sample_flow",
    "soft_argmax_step",
    "weighted_median3",
    "write_flow",
    "read_flow",
    "FB_ALPHA",
    "FB_BETA",
]

FB_ALPHA = 0.01
FB_BETA = 0.5
PERFECT_MATCH = 1.0 - 1e-6


@dataclass
class FlowField:
    """Per-pixel displacement ``uv`` of shape ``(H, W, 2)`` plus a validity mask."""

    uv: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float64)
        if self.uv.ndim != 3 or self.uv.shape[2] != 2:
            raise ValueError(f"flow must have shape (H, W, 2), got {self.uv.shape}")
        if self.valid is None:
            self.valid = np.ones(self.uv.shape[:2], dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.uv.shape[:2]:
                raise ValueError("valid mask extent does not match flow")
        if not np.all(np.isfinite(self.uv)):
            raise ValueError("flow must be finite")

    @property
    def height(self) -> int:
        return self.uv.shape[0]

    @property
    def width(self) -> int:
        return self.uv.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.uv.shape[:2]

    @property
    def u(self) -> np.ndarray:
        return self.uv[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.uv[..., 1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)))

    @classmethod
    def uniform(cls, height: int, width: int, du: float, dv: float) -> "FlowField":
        uv = np.empty((height, width, 2))
        uv[..., 0] = du
        uv[..., 1] = dv
        return cls(uv)

    def copy(self) -> "FlowField":
        return FlowField(self.uv.copy(), self.valid.copy())


class FlowPair(NamedTuple):
    forward: FlowField
    backward: FlowField
    conf_forward: np.ndarray
    conf_backward: np.ndarray


class FlowEstimator(Protocol):
    """Anything that can stand in for the built-in flow backend."""

    def estimate_flow(self, src: np.ndarray, dst: np.ndarray, iters: int) -> tuple[FlowField, np.ndarray]:
        ...


def _check_same_extent(a: FlowField, b: FlowField):
    if a.shape != b.shape:
        raise ValueError(f"flow extents differ: {a.shape} vs {b.shape}")


def grid_coords(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Index-coordinate grids ``(x, y)`` for an ``height x width`` raster."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    return xx, yy


def sample_flow(flow: FlowField, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample ``flow`` at continuous points ``pts[..., (x, y)]``.

    Returns ``(uv, inside)`` where ``inside`` marks points within the hull of
    the pixel centers; outside points get border-replicated values.
    """
    pts = np.asarray(pts, dtype=np.float64)
    x = pts[..., 0] - 0.5
    y = pts[..., 1] - 0.5
    inside = (x >= 0) & (x <= flow.width - 1) & (y >= 0) & (y <= flow.height - 1)
    return bilinear_sample(flow.uv, x, y), inside


# ---------------------------------------------------------------------------
# correlation volume

class CostVolume:
    """All-pairs correlation between a source and a target feature map.

    ``levels[0][i, j, k, l]`` is the dot product of source cell ``(i, j)`` with
    target cell ``(k, l)``; level ``n`` average-pools the target dims by ``2**n``.
    """

    def __init__(self, levels: list[np.ndarray], origin: int = 0):
        self.levels = levels
        self.origin = origin  # target index of grid cell 0 (non-zero for padded volumes)

    @property
    def source_shape(self) -> tuple[int, int]:
        return self.levels[0].shape[:2]

    @property
    def target_shape(self) -> tuple[int, int]:
        return tuple(n - 2 * self.origin for n in self.levels[0].shape[2:])

    def __getitem__(self, idx):
        return self.levels[0][idx]

    def lookup(self, coords: np.ndarray, radius: int, level: int = 0, fill: float = 0.0) -> np.ndarray:
        """Correlation around ``coords`` (target-cell index coords, one per source cell).

        ``coords`` has shape ``(Hs, Ws, 2)`` in level-0 units; the result is
        ``(Hs, Ws, 2r+1, 2r+1)`` indexed ``[.., dy + r, dx + r]``.  Samples
        falling outside the target grid read as ``fill`` (zero by default).
        """
        vol = self.levels[level]
        hs, ws, ht, wt = vol.shape
        scale = 2.0 ** level
        c = coords.reshape(-1, 2) / scale + self.origin / scale
        return _lookup(vol.reshape(hs * ws, ht, wt), c[:, 0], c[:, 1], radius, fill).reshape(hs, ws, 2 * radius + 1, 2 * radius + 1)


def _lookup(vol: np.ndarray, cx: np.ndarray, cy: np.ndarray, radius: int, fill: float = 0.0) -> np.ndarray:
    n, ht, wt = vol.shape
    cx, cy = np.broadcast_arrays(np.asarray(cx, dtype=np.float64), np.asarray(cy, dtype=np.float64))
    x0 = np.floor(cx)
    y0 = np.floor(cy)
    fx = (cx - x0)[:, None, None]
    fy = (cy - y0)[:, None, None]
    # every sample of a neighborhood shares the same fractional offset, so one
    # (2r+2)^2 integer patch per cell holds all bilinear corners
    d = np.arange(-radius, radius + 2)
    xi = x0.astype(np.intp)[:, None] + d
    yi = y0.astype(np.intp)[:, None] + d
    okx = (xi >= 0) & (xi < wt)
    oky = (yi >= 0) & (yi < ht)
    ok = oky[:, :, None] & okx[:, None, :]
    idx = np.clip(yi, 0, ht - 1)[:, :, None] * wt + np.clip(xi, 0, wt - 1)[:, None, :]
    flat = vol.reshape(n, ht * wt)
    patch = np.take_along_axis(flat, idx.reshape(n, -1), axis=1).reshape(idx.shape)
    patch = np.where(ok, patch, fill)
    top = patch[:, :-1, :-1] * (1.0 - fx) + patch[:, :-1, 1:] * fx
    bot = patch[:, 1:, :-1] * (1.0 - fx) + patch[:, 1:, 1:] * fx
    return top * (1.0 - fy) + bot * fy


def build_cost_volume(src: np.ndarray, dst: np.ndarray, levels: int = 1) -> CostVolume:
    if src.shape[-1] != dst.shape[-1]:
        raise ValueError(f"channel mismatch: {src.shape[-1]} vs {dst.shape[-1]}")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    hs, ws, c = src.shape
    ht, wt, _ = dst.shape
    vol = (src.reshape(-1, c) @ dst.reshape(-1, c).T).reshape(hs, ws, ht, wt)
    out = [vol]
    for _ in range(1, levels):
        prev = out[-1]
        h2, w2 = prev.shape[2] // 2, prev.shape[3] // 2
        if h2 < 1 or w2 < 1:
            break
        p = prev[:, :, :2 * h2, :2 * w2].reshape(hs, ws, h2, 2, w2, 2)
        out.append(p.mean(axis=(3, 5)))
    return CostVolume(out)


SHRINK = 0.25


def _shift_sum_count(n_src: int, n_dst: int, radius: int, pad: int) -> np.ndarray:
    """How many in-grid pairs ``(i + d, k + d)`` the box around ``(i, k)`` covers, for one axis."""
    i = np.arange(n_src)[:, None, None]
    k = np.arange(n_dst + 2 * pad)[None, :, None] - pad
    d = np.arange(-radius, radius + 1)[None, None, :]
    ok = (i + d >= 0) & (i + d < n_src) & (k + d >= 0) & (k + d < n_dst)
    return ok.sum(axis=-1).astype(np.float64)


def aggregate_cost(vol: np.ndarray, radius: int, pad: int = 0) -> np.ndarray:
    """Average ``vol[i, j, k, l]`` over source/target cells moved together by the same offset.

    This is block matching on top of cell correlation: each entry becomes the
    mean correlation of a ``(2r+1)^2`` cell patch at constant displacement,
    which disambiguates cells whose own descriptors look alike.  With ``pad``
    the target grid is extended by ``pad`` cells on each side; those entries
    average only the in-grid part of the patch, shrunk toward the mean
    correlation in proportion to how little of the patch is left.
    """
    if radius <= 0 and pad <= 0:
        return vol
    hs, ws, ht, wt = vol.shape
    # single precision halves the memory traffic of this hot loop
    val = np.zeros((hs, ws, ht + 2 * pad, wt + 2 * pad), dtype=np.float32)
    val[:, :, pad:pad + ht, pad:pad + wt] = vol
    # rows (axes 0 and 2), then columns (axes 1 and 3); the box is separable
    for a_src, a_dst in ((0, 2), (1, 3)):
        n_src, n_dst = val.shape[a_src], val.shape[a_dst]
        acc = val.copy()
        for d in range(-radius, radius + 1):
            if d == 0:
                continue
            s_lo, s_hi = max(0, -d), min(n_src, n_src - d)
            t_lo, t_hi = max(0, -d), min(n_dst, n_dst - d)
            if s_hi <= s_lo or t_hi <= t_lo:
                continue
            dst_idx = [slice(None)] * 4
            src_idx = [slice(None)] * 4
            dst_idx[a_src], src_idx[a_src] = slice(s_lo, s_hi), slice(s_lo + d, s_hi + d)
            dst_idx[a_dst], src_idx[a_dst] = slice(t_lo, t_hi), slice(t_lo + d, t_hi + d)
            acc[tuple(dst_idx)] += val[tuple(src_idx)]
        val = acc
    cnt = (_shift_sum_count(hs, ht, radius, pad)[:, None, :, None]
           * _shift_sum_count(ws, wt, radius, pad)[None, :, None, :])
    # shrink sparsely supported entries toward the typical correlation so that a
    # few lucky cells at a large displacement cannot outvote a full patch
    prior = float(vol.mean())
    k = SHRINK * (2 * radius + 1) ** 2
    val += np.float32(k * prior)
    val /= (cnt + k).astype(np.float32)
    return val


def soft_argmax_step(samples: np.ndarray, temperature: float, hold: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Displacement to the soft-argmax of each ``(2r+1)^2`` neighborhood.

    ``samples`` is ``(..., 2r+1, 2r+1)``.  Returns ``(delta[..., (dx, dy)], peak)``.
    Offsets are accumulated in symmetric pairs so a symmetric neighborhood
    yields exactly zero.  When ``hold`` is given, cells whose center sample is
    at least ``hold`` do not move.
    """
    k = samples.shape[-1]
    r = k // 2
    peak = samples.max(axis=(-2, -1))
    w = np.exp((samples - peak[..., None, None]) / temperature)
    total = w.sum(axis=(-2, -1))
    wx = w.sum(axis=-2)
    wy = w.sum(axis=-1)
    dx = np.zeros(peak.shape)
    dy = np.zeros(peak.shape)
    for d in range(1, r + 1):
        dx += d * (wx[..., r + d] - wx[..., r - d])
        dy += d * (wy[..., r + d] - wy[..., r - d])
    delta = np.stack([dx / total, dy / total], axis=-1)
    if hold is not None:
        center = samples[..., r, r]
        delta = np.where((center >= hold)[..., None], 0.0, delta)
    return delta, peak


def subcell_peak_step(samples: np.ndarray, hold: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Displacement to the neighborhood maximum, refined by a 1-D parabola per axis.

    Same conventions as :func:`soft_argmax_step`.  The parabola through the
    maximum and its two axis neighbors places the peak to sub-cell precision
    (at most half a cell away from the best sample).
    """
    k = samples.shape[-1]
    r = k // 2
    flat = samples.reshape(*samples.shape[:-2], k * k)
    peak = flat.max(axis=-1)
    iy, ix = np.unravel_index(flat.argmax(axis=-1), (k, k))
    ix = np.clip(ix, 1, k - 2)
    iy = np.clip(iy, 1, k - 2)

    def at(yy, xx):
        return np.take_along_axis(flat, (yy * k + xx)[..., None], axis=-1)[..., 0]

    def vertex(a, b, c):
        den = a - 2.0 * b + c
        ok = den < -1e-12
        return np.where(ok, np.clip(0.5 * (a - c) / np.where(ok, den, -1.0), -0.5, 0.5), 0.0)

    dx = ix - r + vertex(at(iy, ix - 1), at(iy, ix), at(iy, ix + 1))
    dy = iy - r + vertex(at(iy - 1, ix), at(iy, ix), at(iy + 1, ix))
    delta = np.stack([dx, dy], axis=-1).astype(np.float64)
    if hold is not None:
        delta = np.where((samples[..., r, r] >= hold)[..., None], 0.0, delta)
    return delta, peak


def weighted_median3(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted median over each 3x3 neighborhood (edge replicated) of a 2-D field."""
    h, w = values.shape
    pv = np.pad(values, 1, mode="edge")
    pw = np.pad(weights, 1, mode="edge")
    nv = sliding_window_view(pv, (3, 3)).reshape(h, w, 9)
    nw = sliding_window_view(pw, (3, 3)).reshape(h, w, 9)
    order = np.argsort(nv, axis=-1, kind="stable")
    sv = np.take_along_axis(nv, order, axis=-1)
    sw = np.take_along_axis(nw, order, axis=-1)
    cw = np.cumsum(sw, axis=-1)
    half = 0.5 * cw[..., -1:]
    idx = np.argmax(cw >= half, axis=-1)
    return np.take_along_axis(sv, idx[..., None], axis=-1)[..., 0]


# ---------------------------------------------------------------------------
# flow estimation

def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    if h % 2 or w % 2:
        img = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
        h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


@lru_cache(maxsize=64)
def _interp_matrix(n_px: int, n_cells: int, offset: int = 0) -> np.ndarray:
    """``(n_px, n_cells)`` linear interpolation weights from cell centers to pixel centers.

    Cell ``k`` has its center at pixel coordinate ``offset + 8k + 4``; pixels
    beyond the outermost centers are linearly extrapolated.
    """
    pos = (np.arange(n_px) + 0.5 - offset - 0.5 * STRIDE) / STRIDE
    m = np.zeros((n_px, n_cells))
    if n_cells == 1:
        m[:, 0] = 1.0
        return m
    i0 = np.clip(np.floor(pos).astype(np.intp), 0, n_cells - 2)
    f = pos - i0
    rows = np.arange(n_px)
    m[rows, i0] = 1.0 - f
    m[rows, i0 + 1] = f
    return m


def _upsample_cells(cells: np.ndarray, height: int, width: int, offset: int = 0) -> np.ndarray:
    """Bilinear upsampling of a per-cell field to pixels, linearly extrapolated at borders.

    ``offset`` is the pixel position of the cell grid's origin, for rasters
    that extend beyond the cells on every side.
    """
    my = _interp_matrix(height, cells.shape[0], offset)
    mx = _interp_matrix(width, cells.shape[1], offset)
    return np.einsum("yi,ij...,xj->yx...", my, cells, mx, optimize=True)


def _resample_cells(cells: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Map a per-cell flow (px) of a coarser level onto the next finer level's cells."""
    hf, wf = shape
    q_x = (np.arange(wf) - 0.5) / 2.0
    q_y = (np.arange(hf) - 0.5) / 2.0
    return 2.0 * bilinear_sample(cells, q_x[None, :], q_y[:, None])


LK_SIGMA = 6.0
MATCH_SIGMA = 3.0
MATCH_RATIO = 0.5
REFINE_TOL = 0.01  # px; Gauss-Newton stops once every cell moves less


@lru_cache(maxsize=64)
def _window_matrix(n_cells: int, n_px: int) -> np.ndarray:
    # Gaussian weights of every pixel center around each cell center, cut at 2 sigma
    d = (np.arange(n_px) + 0.5)[None, :] - (np.arange(n_cells) * STRIDE + 0.5 * STRIDE)[:, None]
    return np.where(np.abs(d) <= 2 * LK_SIGMA, np.exp(-0.5 * (d / LK_SIGMA) ** 2), 0.0)


def _cell_window_sum(arr: np.ndarray, hc: int, wc: int) -> np.ndarray:
    """Gaussian-weighted sums of ``arr[..., k]`` around every cell center."""
    wy = _window_matrix(hc, arr.shape[0])
    wx = _window_matrix(wc, arr.shape[1])
    return np.einsum("iy,yx...,jx->ij...", wy, arr, wx, optimize=True)


def _cell_fb_residual(cells: np.ndarray, other: np.ndarray) -> np.ndarray:
    hc, wc = cells.shape[:2]
    yy, xx = np.mgrid[0:hc, 0:wc].astype(np.float64)
    back = bilinear_sample(other, xx + cells[..., 0] / STRIDE, yy + cells[..., 1] / STRIDE)
    return np.hypot(*np.moveaxis(cells + back, -1, 0))


def _fill_inconsistent(cells: np.ndarray, other: np.ndarray, tol: float = 0.25 * STRIDE) -> np.ndarray:
    """Replace cells failing the forward-backward check by a smooth fill from consistent ones."""
    good = _cell_fb_residual(cells, other) <= tol + 0.05 * np.hypot(cells[..., 0], cells[..., 1])
    if good.all() or not good.any():
        return cells
    w = good.astype(np.float64)
    out = cells.copy()
    missing = ~good
    sigma = 1.0
    while missing.any():
        num = np.stack([ndimage.gaussian_filter(cells[..., k] * w, sigma, mode="nearest") for k in range(2)], axis=-1)
        den = ndimage.gaussian_filter(w, sigma, mode="nearest")
        ok = missing & (den > 1e-3)
        out[ok] = num[ok] / den[ok, None]
        missing &= ~ok
        sigma *= 2.0
    return out


def _bandpass(img: np.ndarray) -> np.ndarray:
    return img - ndimage.gaussian_filter(img, 6.0, mode="nearest")


@dataclass
class CorrelationFlow:
    """Deterministic correlation-volume flow backend.

    Parameters mirror the knobs of the estimator; defaults are 3 pyramid
    levels, lookup radius 4 cells, 4 lookup iterations per level.
    """

    levels: int = 3
    radius: int = 4
    iters: int = 4
    temperature: float = 0.05
    refine_iters: int = 1
    sigma_c: float = 1.5
    channels: int = 32
    max_refine_step: float = 2.0
    support: int = 2  # cost aggregation radius, cells

    # -- public API -----------------------------------------------------
    def estimate_flow(self, src: np.ndarray, dst: np.ndarray, iters: int | None = None) -> tuple[FlowField, np.ndarray]:
        pair = self.estimate_flow_pair(src, dst, iters)
        return pair.forward, pair.conf_forward

    def estimate_flow_pair(self, src: np.ndarray, dst: np.ndarray, iters: int | None = None) -> FlowPair:
        """Forward and backward flow with their confidence maps."""
        iters = self.iters if iters is None else iters
        if iters < 1:
            raise ValueError("iters must be >= 1")
        a = to_gray(src)
        b = to_gray(dst)
        if a.shape != b.shape:
            raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
        if a.shape[0] < STRIDE or a.shape[1] < STRIDE:
            raise ValueError("patch too small")
        pyr_a, pyr_b = self._pyramid(a), self._pyramid(b)
        feats_a = [encode(p, self.channels) for p in pyr_a]
        feats_b = [encode(p, self.channels) for p in pyr_b]
        band_a = [_bandpass(p) for p in pyr_a]
        band_b = [_bandpass(p) for p in pyr_b]
        vols_ab, vols_ba = [], []
        for fa, fb in zip(feats_a, feats_b):
            raw = build_cost_volume(fa, fb, 1).levels[0]
            vols_ab.append(self._support_volume(raw))
            vols_ba.append(self._support_volume(raw.transpose(2, 3, 0, 1)))

        cells_f, cells_b = self._coarse_to_fine(vols_ab, vols_ba, band_a, band_b, iters)
        fwd = self._to_pixels(cells_f, band_a[0], band_b[0])
        bwd = self._to_pixels(cells_b, band_b[0], band_a[0])
        conf_f = self._confidence(fwd, bwd, cells_f, feats_a[0], b, vols_ab[0]) * fwd.valid
        conf_b = self._confidence(bwd, fwd, cells_b, feats_b[0], a, vols_ba[0]) * bwd.valid
        return FlowPair(fwd, bwd, conf_f, conf_b)

    # -- internals --------------------------------------------------------
    def _support_volume(self, raw: np.ndarray) -> CostVolume:
        return CostVolume([aggregate_cost(raw, self.support, self.support)], origin=self.support)

    def _pyramid(self, img: np.ndarray) -> list[np.ndarray]:
        pyr = [img]
        for _ in range(1, self.levels):
            nxt = _downsample2(pyr[-1])
            if min(nxt.shape) < 2 * STRIDE:
                break
            pyr.append(nxt)
        return pyr

    def _coarse_to_fine(self, vols_ab: list[CostVolume], vols_ba: list[CostVolume],
                        band_a: list[np.ndarray], band_b: list[np.ndarray], iters: int):
        cf = cb = None
        for level in reversed(range(len(vols_ab))):
            shape = vols_ab[level].source_shape
            if cf is None:
                cf, cb = np.zeros(shape + (2,)), np.zeros(shape + (2,))
            else:
                cf, cb = _resample_cells(cf, shape), _resample_cells(cb, shape)
            cf = self._refine(band_a[level], band_b[level], self._lookup_refine(vols_ab[level], cf, iters))
            cb = self._refine(band_b[level], band_a[level], self._lookup_refine(vols_ba[level], cb, iters))
            if level > 0:
                # coarse levels only seed the next one: drop cells the two directions disagree on
                cf, cb = _fill_inconsistent(cf, cb), _fill_inconsistent(cb, cf)
        return cf, cb

    def _lookup_refine(self, vol: CostVolume, cells: np.ndarray, iters: int) -> np.ndarray:
        hs, ws = vol.source_shape
        yy, xx = np.mgrid[0:hs, 0:ws].astype(np.float64)
        for _ in range(iters):
            coords = np.stack([xx + cells[..., 0] / STRIDE, yy + cells[..., 1] / STRIDE], axis=-1)
            # off-grid samples read as the worst possible score so cells are not pulled outward
            samples = vol.lookup(coords, self.radius, fill=-1.0)
            center = samples[..., self.radius, self.radius]
            # a cell already sitting on its neighborhood maximum stays put
            hold = samples.max(axis=(-2, -1)) <= center
            delta, peak = soft_argmax_step(samples, self.temperature)
            delta = np.where(hold[..., None], 0.0, delta)
            cells = cells + delta * STRIDE
            weight = np.maximum(peak, 1e-3)
            cells = np.stack([weighted_median3(cells[..., 0], weight), weighted_median3(cells[..., 1], weight)], axis=-1)
        return cells

    def _refine(self, src: np.ndarray, dst: np.ndarray, cells: np.ndarray) -> np.ndarray:
        """Gauss-Newton (Lucas-Kanade) steps on band-passed images, one Gaussian window per cell."""
        h, w = src.shape
        hc, wc = cells.shape[:2]
        xx, yy = grid_coords(h, w)
        for _ in range(self.refine_iters):
            flow = _upsample_cells(cells, h, w)
            xs = xx + flow[..., 0]
            ys = yy + flow[..., 1]
            inside = ((xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)).astype(np.float64)
            warped = bilinear_sample(dst, xs, ys)
            gy, gx = np.gradient(0.5 * (src + warped))
            resid = warped - src
            gx = gx * inside
            gy = gy * inside
            prods = np.stack([gx * gx, gx * gy, gy * gy, gx * resid, gy * resid], axis=-1)
            sxx, sxy, syy, bx, by = np.moveaxis(_cell_window_sum(prods, hc, wc), -1, 0)
            trace = sxx + syy
            reg = 1e-3 * trace + 1e-12
            a11, a22 = sxx + reg, syy + reg
            det = a11 * a22 - sxy * sxy
            du = -(a22 * bx - sxy * by) / det
            dv = -(a11 * by - sxy * bx) / det
            step = np.stack([du, dv], axis=-1)
            norm = np.max(np.abs(step), axis=-1, keepdims=True)
            step = np.where(norm > self.max_refine_step, step * (self.max_refine_step / np.maximum(norm, 1e-12)), step)
            step = np.where((trace > 1e-10)[..., None], step, 0.0)
            cells = cells + step
            if np.max(np.abs(step)) < REFINE_TOL:
                break
        return cells

    def _to_pixels(self, cells: np.ndarray, src: np.ndarray, dst: np.ndarray) -> FlowField:
        """Upsample cell flow to pixels; ``valid`` keeps in-frame targets that actually match."""
        h, w = src.shape
        uv = _upsample_cells(cells, h, w)
        uv[..., 0] = np.clip(uv[..., 0], -w, w)
        uv[..., 1] = np.clip(uv[..., 1], -h, h)
        xx, yy = grid_coords(h, w)
        xs = xx + uv[..., 0]
        ys = yy + uv[..., 1]
        inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
        warped = bilinear_sample(dst, xs, ys)
        # unrelated band-passed signals give a residual energy close to the sum of
        # their energies; true correspondences leave only a small fraction of it
        resid = ndimage.gaussian_filter((warped - src) ** 2, MATCH_SIGMA, mode="nearest")
        energy = ndimage.gaussian_filter(src * src + warped * warped, MATCH_SIGMA, mode="nearest")
        matched = resid <= MATCH_RATIO * energy + 1e-8
        return FlowField(uv, inside & matched)

    def _confidence(self, fwd: FlowField, bwd: FlowField, cells: np.ndarray, feat_src: np.ndarray,
                    dst: np.ndarray, vol: CostVolume) -> np.ndarray:
        h, w = fwd.shape
        xx, yy = grid_coords(h, w)
        xs = xx + fwd.u
        ys = yy + fwd.v
        back = bilinear_sample(bwd.uv, xs, ys)
        fb = fwd.uv + back
        fb_term = np.exp(-np.sum(fb * fb, axis=-1) / self.sigma_c ** 2)

        warped = bilinear_sample(dst, xs, ys)
        best = np.sum(feat_src * encode(warped, self.channels), axis=-1)
        hs, ws = vol.source_shape
        cy, cx = np.mgrid[0:hs, 0:ws].astype(np.float64)
        coords = np.stack([cx + np.round(cells[..., 0] / STRIDE), cy + np.round(cells[..., 1] / STRIDE)], axis=-1)
        samples = vol.lookup(coords, self.radius).copy()
        r = self.radius
        samples[..., r - 1:r + 2, r - 1:r + 2] = -np.inf
        second = samples.max(axis=(-2, -1))
        denom = 1.0 - second
        ratio = np.where(denom > 1e-9, (best - second) / np.where(denom > 1e-9, denom, 1.0), 0.0)
        ratio = np.clip(ratio, 0.0, 1.0)
        ratio_px = np.clip(_upsample_cells(ratio, h, w), 0.0, 1.0)
        return np.clip(fb_term * ratio_px, 0.0, 1.0)


_DEFAULT_BACKEND = CorrelationFlow()


def estimate_flow(src: np.ndarray, dst: np.ndarray, iters: int = 4, backend: CorrelationFlow | None = None) -> tuple[FlowField, np.ndarray]:
    """Dense flow ``src -> dst`` at pixel resolution and its confidence in ``[0, 1]``."""
    return (backend or _DEFAULT_BACKEND).estimate_flow(src, dst, iters)


def estimate_flow_pair(src: np.ndarray, dst: np.ndarray, iters: int = 4, backend=None) -> FlowPair:
    backend = backend or _DEFAULT_BACKEND
    if hasattr(backend, "estimate_flow_pair"):
        return backend.estimate_flow_pair(src, dst, iters)
    fwd, cf = backend.estimate_flow(src, dst, iters)
    bwd, cb = backend.estimate_flow(dst, src, iters)
    return FlowPair(fwd, bwd, cf, cb)


# ---------------------------------------------------------------------------
# flow algebra and occlusion

def compose_flow(g_prev: FlowField, v: FlowField) -> FlowField:
    """``G(x) + V(x + G(x))``; points landing outside ``v``'s grid become invalid."""
    _check_same_extent(g_prev, v)
    xx, yy = grid_coords(*g_prev.shape)
    xs = xx + g_prev.u
    ys = yy + g_prev.v
    inside = (xs >= 0) & (xs <= v.width - 1) & (ys >= 0) & (ys <= v.height - 1)
    sampled = bilinear_sample(v.uv, xs, ys)
    return FlowField(g_prev.uv + sampled, g_prev.valid & inside)


def fb_occlusion(fwd: FlowField, bwd: FlowField, alpha: float = FB_ALPHA, beta: float = FB_BETA) -> np.ndarray:
    """Forward-backward consistency occlusion map on ``fwd``'s grid (True = occluded).

    Pixels whose forward target leaves the frame, or whose forward flow is
    marked invalid (no matching content was found), count as occluded too.
    """
    _check_same_extent(fwd, bwd)
    xx, yy = grid_coords(*fwd.shape)
    xs = xx + fwd.u
    ys = yy + fwd.v
    leaves = (xs < 0) | (xs > fwd.width - 1) | (ys < 0) | (ys > fwd.height - 1)
    back = bilinear_sample(bwd.uv, xs, ys)
    resid = np.sum((fwd.uv + back) ** 2, axis=-1)
    bound = alpha * (np.sum(fwd.uv ** 2, axis=-1) + np.sum(back ** 2, axis=-1)) + beta
    return (resid > bound) | leaves | ~fwd.valid


def _box_pixel_ranges(shape: tuple[int, int], b: BBox) -> tuple[slice, slice]:
    h, w = shape
    # pixels whose centers (j + 0.5) fall inside [x, x + w)
    j0 = max(int(np.ceil(b.x - 0.5)), 0)
    j1 = min(int(np.ceil(b.x2 - 0.5)), w)
    i0 = max(int(np.ceil(b.y - 0.5)), 0)
    i1 = min(int(np.ceil(b.y2 - 0.5)), h)
    return slice(i0, max(i1, i0)), slice(j0, max(j1, j0))


def occlusion_fraction(o: np.ndarray, b: BBox) -> float:
    rows, cols = _box_pixel_ranges(o.shape, b)
    region = o[rows, cols]
    if region.size == 0:
        raise ValueError("box does not intersect the occlusion map")
    return float(np.count_nonzero(region)) / region.size


def region_mask(shape: tuple[int, int], b: BBox) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    rows, cols = _box_pixel_ranges(shape, b)
    mask[rows, cols] = True
    return mask


# ---------------------------------------------------------------------------
# "ADFL" flow dumps

_MAGIC = b"ADFL"


def write_flow(path: str | Path, flow: FlowField) -> None:
    h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(flow.uv, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(flow.valid, dtype=np.uint8).tobytes())


def read_flow(path: str | Path) -> FlowField:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not an ADFL flow file")
    w, h = struct.unpack("<II", data[4:12])
    n = w * h
    expected = 12 + 8 * n + n
    if len(data) != expected:
        raise ValueError(f"{path}: truncated flow file ({len(data)} bytes, expected {expected})")
    uv = np.frombuffer(data, dtype="<f4", count=2 * n, offset=12).reshape(h, w, 2).astype(np.float64)
    valid = np.frombuffer(data, dtype=np.uint8, count=n, offset=12 + 8 * n).reshape(h, w).astype(bool)
    return FlowField(uv, valid)
