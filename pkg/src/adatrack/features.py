"""Handcrafted stride-8 dense descriptors.

Each 8x8 cell is described by three groups of channels, every one of them
invariant to a uniform brightness offset:

* census signs at 3 scales x 4 directions (12 channels),
* magnitude-weighted gradient-orientation histograms, 8 bins x 2 scales (16),
* intensity statistics: local contrast, standard deviation and the mean and
  mean-absolute band-pass response (4).

Groups are L2-normalized separately, weighted, concatenated and then
L2-normalized per cell.  Cells without any structure map to the zero vector.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import ndimage

from .geometry import to_gray

__all__ = [
    "STRIDE",
    "NATIVE_CHANNELS",
    "CENSUS_CHANNELS",
    "GRADIENT_CHANNELS",
    "STAT_CHANNELS",
    "encode",
    "feature_shape",
]

STRIDE = 8
CENSUS_SCALES = (1, 2, 4)
CENSUS_DIRECTIONS = ((1, 0), (0, 1), (1, 1), (1, -1))
ORIENTATION_BINS = 8
GRADIENT_SIGMAS = (1.0, 2.0)

CENSUS_CHANNELS = slice(0, 12)
GRADIENT_CHANNELS = slice(12, 28)
STAT_CHANNELS = slice(28, 32)
NATIVE_CHANNELS = 32

# census sign dead zone; differences this small count as ties
CENSUS_EPS = 1e-3
GROUP_WEIGHTS = (0.55, 0.7, 0.45)
ZERO_NORM = 1e-8


def feature_shape(height: int, width: int) -> tuple[int, int]:
    return -(-height // STRIDE), -(-width // STRIDE)


def _pad_to_stride(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ph = (-h) % STRIDE
    pw = (-w) % STRIDE
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="edge")
    return img


def _cell_sum(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[:2]
    return x.reshape(h // STRIDE, STRIDE, w // STRIDE, STRIDE, *x.shape[2:]).sum(axis=(1, 3))


def _shifted(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """``out[i, j] = img[i + dy, j + dx]`` with edge replication."""
    h, w = img.shape
    p = max(abs(dx), abs(dy))
    padded = np.pad(img, p, mode="edge")
    return padded[p + dy:p + dy + h, p + dx:p + dx + w]


def _census(img: np.ndarray) -> np.ndarray:
    chans = []
    for s in CENSUS_SCALES:
        base = img if s == 1 else ndimage.gaussian_filter(img, 0.5 * s, mode="nearest")
        for dx, dy in CENSUS_DIRECTIONS:
            d = _shifted(base, dx * s, dy * s) - base
            sign = (d > CENSUS_EPS).astype(np.float64) - (d < -CENSUS_EPS).astype(np.float64)
            chans.append(_cell_sum(sign))
    return np.stack(chans, axis=-1) / (STRIDE * STRIDE)


def _orientation_hist(img: np.ndarray, sigma: float) -> np.ndarray:
    gx = ndimage.gaussian_filter(img, sigma, order=(0, 1), mode="nearest")
    gy = ndimage.gaussian_filter(img, sigma, order=(1, 0), mode="nearest")
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx) % (2 * np.pi)
    pos = ang / (2 * np.pi) * ORIENTATION_BINS
    lo = np.floor(pos).astype(np.intp) % ORIENTATION_BINS
    hi = (lo + 1) % ORIENTATION_BINS
    frac = pos - np.floor(pos)
    h, w = img.shape
    hc, wc = h // STRIDE, w // STRIDE
    # soft-binned magnitude, accumulated per (cell, bin)
    cell = ((np.arange(h) // STRIDE)[:, None] * wc + (np.arange(w) // STRIDE)[None, :]) * ORIENTATION_BINS
    n = hc * wc * ORIENTATION_BINS
    hist = np.bincount((cell + lo).ravel(), (mag * (1.0 - frac)).ravel(), minlength=n)
    hist += np.bincount((cell + hi).ravel(), (mag * frac).ravel(), minlength=n)
    return hist.reshape(hc, wc, ORIENTATION_BINS) / (STRIDE * STRIDE)


def _stats(img: np.ndarray) -> np.ndarray:
    n = STRIDE * STRIDE
    mean = _cell_sum(img) / n
    var = np.maximum(_cell_sum(img * img) / n - mean * mean, 0.0)
    # direct 3x3 mean; a running-sum filter would make the result position dependent in the last bit
    around = ndimage.correlate(mean, np.full((3, 3), 1.0 / 9.0), mode="nearest")
    contrast = mean - around
    band = ndimage.gaussian_filter(img, 1.0, mode="nearest") - ndimage.gaussian_filter(img, 3.0, mode="nearest")
    band_mean = _cell_sum(band) / n
    band_abs = _cell_sum(np.abs(band)) / n
    return np.stack([contrast, np.sqrt(var), band_mean, band_abs], axis=-1)


def _normalize(x: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    safe = np.where(norm > ZERO_NORM, norm, 1.0)
    return np.where(norm > ZERO_NORM, x / safe, 0.0)


@lru_cache(maxsize=8)
def _projection(channels: int) -> np.ndarray:
    rng = np.random.default_rng(0)
    m = rng.standard_normal((NATIVE_CHANNELS, channels))
    if channels <= NATIVE_CHANNELS:
        q, _ = np.linalg.qr(m)
        return q
    return m / np.sqrt(NATIVE_CHANNELS)


def encode(img: np.ndarray, channels: int = NATIVE_CHANNELS) -> np.ndarray:
    """Encode an image into a ``(ceil(H/8), ceil(W/8), channels)`` feature map.

    Each cell vector has unit L2 norm, or is exactly zero for cells with no
    structure (e.g. a constant image).  With ``channels != 32`` the native
    descriptor is mapped through a fixed seeded projection before normalizing.
    """
    gray = to_gray(img)
    if gray.shape[0] < STRIDE or gray.shape[1] < STRIDE:
        raise ValueError("patch too small")
    if channels < 1:
        raise ValueError("channels must be positive")
    gray = _pad_to_stride(gray)
    groups = (
        _census(gray),
        np.concatenate([_orientation_hist(gray, s) for s in GRADIENT_SIGMAS], axis=-1),
        _stats(gray),
    )
    desc = np.concatenate([w * _normalize(g) for w, g in zip(GROUP_WEIGHTS, groups)], axis=-1)
    if channels != NATIVE_CHANNELS:
        desc = desc @ _projection(channels)
    return _normalize(desc)
