"""Trajectory metrics and self-check losses.

Metrics score a predicted trajectory against ground truth.  The losses are
plain numbers computed from flows, images and boxes; nothing here is ever
differentiated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .flow import FlowField, grid_coords
from .geometry import BBox, bilinear_sample, crop_resample, giou, iou, to_gray
from .template import TEMPLATE_SIZE
from .tracker import TrackerConfig, TrackResult, TrackStatus, init, step

__all__ = [
    "GroundTruth",
    "Metrics2D",
    "LossReport",
    "CycleResult",
    "DEFAULT_LAMBDAS",
    "CHARBONNIER_EPS",
    "metric_suite",
    "frame_overlaps",
    "expected_average_overlap",
    "cycle_check",
    "photometric_loss",
    "smoothness_loss",
    "box_l1",
    "augmentation_loss",
    "combine_losses",
    "diagnostic_losses",
    "format_report",
]

DEFAULT_LAMBDAS = (0.5, 0.1, 0.1, 0.001)
CHARBONNIER_EPS = 1e-3
EDGE_WEIGHT = 10.0


class GroundTruth(NamedTuple):
    bbox: BBox
    visible: bool = True


@dataclass(frozen=True)
class Metrics2D:
    acc2d: float
    rob2d: float
    err2d_mean: float
    err2d_std: float
    eao: float

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.acc2d, self.rob2d, self.err2d_mean, self.err2d_std, self.eao)


# ---------------------------------------------------------------------------
# metrics

def _as_gt(item) -> GroundTruth:
    if isinstance(item, GroundTruth):
        return item
    if isinstance(item, BBox):
        return GroundTruth(item, True)
    bbox, visible = item
    return GroundTruth(bbox, bool(visible))


def frame_overlaps(pred: Sequence[TrackResult], gt: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame ``(iou, tracked, visible)``; untracked frames have IoU 0."""
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(gt)} ground-truth frames")
    gts = [_as_gt(g) for g in gt]
    ious = np.array([iou(p.bbox, g.bbox) if p.bbox is not None else 0.0 for p, g in zip(pred, gts)])
    tracked = np.array([p.status == TrackStatus.TRACKED and p.bbox is not None for p in pred], dtype=bool)
    visible = np.array([g.visible for g in gts], dtype=bool)
    return ious, tracked, visible


def expected_average_overlap(ious: np.ndarray, success: np.ndarray, visible: np.ndarray) -> float:
    """Mean over restart anchors ``{0, N//4, N//2}`` of the average overlap from the anchor on.

    From an anchor, frames after the first failure score 0.  Frames whose
    target is not visible are neither failures nor counted in the average.
    """
    n = len(ious)
    if n == 0:
        raise ValueError("empty trajectory")
    scores = []
    for a in sorted({0, n // 4, n // 2}):
        total = 0.0
        count = 0
        failed = False
        for k in range(a, n):
            if not visible[k]:
                continue
            if not success[k]:
                failed = True
            if not failed:
                total += ious[k]
            count += 1
        if count:
            scores.append(total / count)
    return float(np.mean(scores)) if scores else 0.0


def metric_suite(pred: Sequence[TrackResult], gt: Sequence, success_iou: float = 0.0) -> Metrics2D:
    """Accuracy, robustness, center error and EAO of ``pred`` against ``gt``.

    ``gt`` holds :class:`GroundTruth` items (or bare boxes, taken as visible).
    A frame succeeds when the target is visible, the tracker reported a box and
    its IoU exceeds ``success_iou``.
    """
    ious, tracked, visible = frame_overlaps(pred, gt)
    if not visible.any():
        raise ValueError("no visible ground-truth frames to score")
    success = visible & tracked & (ious > success_iou)
    rob = float(np.count_nonzero(success)) / float(np.count_nonzero(visible))
    if success.any():
        acc = float(np.mean(ious[success]))
        gts = [_as_gt(g) for g in gt]
        dists = np.array([
            math.hypot(p.bbox.center.u - g.bbox.center.u, p.bbox.center.v - g.bbox.center.v)
            for p, g, ok in zip(pred, gts, success) if ok
        ])
        err_mean, err_std = float(dists.mean()), float(dists.std())
    else:
        acc, err_mean, err_std = 0.0, 0.0, 0.0
    return Metrics2D(acc, rob, err_mean, err_std, expected_average_overlap(ious, success, visible))


def format_report(named: Sequence[tuple[str, Metrics2D]]) -> str:
    """``name,acc2d,rob2d,err2d_mean,err2d_std,eao`` per sequence plus an ``ALL`` mean line."""
    if not named:
        raise ValueError("nothing to report")
    lines = []
    for name, m in named:
        lines.append(",".join([name] + [f"{v:.3f}" for v in m.as_tuple()]))
    mean = np.mean([m.as_tuple() for _, m in named], axis=0)
    lines.append(",".join(["ALL"] + [f"{v:.3f}" for v in mean]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# cycle consistency

class CycleResult(NamedTuple):
    b_cycle: BBox
    giou_term: float
    l1_term: float
    recon_term: float


def box_l1(a: BBox, b: BBox) -> float:
    """Mean absolute corner difference, each axis normalized by ``b``'s extent."""
    dx = (abs(a.x - b.x) + abs(a.x2 - b.x2)) / b.w
    dy = (abs(a.y - b.y) + abs(a.y2 - b.y2)) / b.h
    return 0.25 * (dx + dy)


def _track_through(frames: Sequence[np.ndarray], b: BBox, config: TrackerConfig) -> BBox:
    state = init(frames[0], b, config)
    for f in frames[1:]:
        step(state, f)
    # after an occluded final frame the held box is the best available answer
    return state.prev_bbox


def cycle_check(frames: Sequence[np.ndarray], b: BBox, config: TrackerConfig | None = None) -> CycleResult:
    """Track ``b`` forward over three frames, then back to the first, and measure the drift."""
    if len(frames) != 3:
        raise ValueError("cycle_check needs exactly three consecutive frames")
    config = config or TrackerConfig()
    first = to_gray(frames[0])
    b_fwd = _track_through(frames, b, config)
    b_cycle = _track_through(frames[::-1], b_fwd, config)
    p = crop_resample(first, b, TEMPLATE_SIZE, TEMPLATE_SIZE)
    p_cycle = crop_resample(first, b_cycle, TEMPLATE_SIZE, TEMPLATE_SIZE)
    return CycleResult(b_cycle, 1.0 - giou(b_cycle, b), box_l1(b_cycle, b), float(np.mean(np.abs(p_cycle - p))))


# ---------------------------------------------------------------------------
# flow losses

def _charbonnier(d: np.ndarray, eps: float = CHARBONNIER_EPS) -> np.ndarray:
    # offset so that a perfect match costs exactly zero
    return np.sqrt(d * d + eps * eps) - eps


def photometric_loss(flow: FlowField, occ: np.ndarray, img0: np.ndarray, img1: np.ndarray) -> float:
    """Mean Charbonnier brightness difference between ``img0`` and ``img1`` pulled back by ``flow``."""
    a, b = to_gray(img0), to_gray(img1)
    if a.shape != b.shape or a.shape != flow.shape or np.shape(occ) != flow.shape:
        raise ValueError("flow, occlusion map and images must share one extent")
    xx, yy = grid_coords(*flow.shape)
    warped = bilinear_sample(b, xx + flow.u, yy + flow.v)
    keep = ~np.asarray(occ, dtype=bool)
    if not keep.any():
        return 0.0
    return float(np.mean(_charbonnier(np.abs(a - warped))[keep]))


def smoothness_loss(flow: FlowField, img: np.ndarray) -> float:
    """Mean first-order flow variation, down-weighted across image edges by ``exp(-10 |dI|)``."""
    a = to_gray(img)
    if a.shape != flow.shape:
        raise ValueError("flow and image must share one extent")
    uv = flow.uv
    terms = []
    for axis in (0, 1):
        d_flow = np.abs(np.diff(uv, axis=axis)).sum(axis=-1)
        weight = np.exp(-EDGE_WEIGHT * np.abs(np.diff(a, axis=axis)))
        if d_flow.size:
            terms.append(np.mean(weight * d_flow))
    return float(sum(terms))


def augmentation_loss(pred: BBox, pseudo: BBox) -> float:
    return (1.0 - giou(pred, pseudo)) + box_l1(pred, pseudo)


@dataclass(frozen=True)
class LossReport:
    l_cycle: float
    l_photo: float
    l_smooth: float
    l_aug: float
    total: float
    giou_term: float = 0.0
    l1_term: float = 0.0
    recon_term: float = 0.0
    lambdas: tuple[float, float, float, float] = DEFAULT_LAMBDAS


def combine_losses(l_cycle: float, l_aug: float, l_photo: float, l_smooth: float,
                   lambdas: Sequence[float] = DEFAULT_LAMBDAS) -> float:
    """Weighted total, summed with correct rounding so the result is independent of term order."""
    if len(lambdas) != 4:
        raise ValueError("need exactly four weights")
    l1, l2, l3, l4 = lambdas
    return math.fsum([l1 * l_cycle, l2 * l_aug, l3 * l_photo, l4 * l_smooth])


def diagnostic_losses(flow: FlowField, conf: np.ndarray, occ_f: np.ndarray, occ_b: np.ndarray,
                      img_pair: tuple[np.ndarray, np.ndarray], cycle: CycleResult,
                      aug: tuple[BBox, BBox], lambdas: Sequence[float] = DEFAULT_LAMBDAS) -> LossReport:
    """All loss components for one frame pair plus their weighted total.

    ``occ_f`` masks pixels out of the photometric term.  ``conf`` and ``occ_b``
    are only checked for a matching extent.
    """
    for name, arr in (("conf", conf), ("occ_f", occ_f), ("occ_b", occ_b)):
        if np.shape(arr) != flow.shape:
            raise ValueError(f"{name} extent {np.shape(arr)} does not match flow {flow.shape}")
    l_photo = photometric_loss(flow, occ_f, *img_pair)
    l_smooth = smoothness_loss(flow, img_pair[0])
    l_aug = augmentation_loss(*aug)
    l_cycle = cycle.giou_term + cycle.l1_term + cycle.recon_term
    lambdas = tuple(float(v) for v in lambdas)
    total = combine_losses(l_cycle, l_aug, l_photo, l_smooth, lambdas)
    return LossReport(l_cycle, l_photo, l_smooth, l_aug, total,
                      cycle.giou_term, cycle.l1_term, cycle.recon_term, lambdas)
