"""Two-stage per-frame tracker: inter-frame flow for a coarse ROI, then template anchor matching.

Per frame the previous and current frames are resampled over a search region
around the previous box, dense flow is estimated both ways, and the share of
the previous box flagged occluded decides whether a prediction is made at
all.  The previous ROI is advected by the flow into a coarse ROI, the
template's accumulated flow is advanced, the re-warped template is fused with
the previous target's features, and the fused template is matched inside the
coarse ROI by two-corner anchor matching.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields
from typing import Iterable

import numpy as np

from .features import STRIDE, encode
from .flow import (
    CorrelationFlow,
    FlowEstimator,
    FlowField,
    estimate_flow_pair,
    fb_occlusion,
    occlusion_fraction,
    sample_flow,
)
from .geometry import (
    BBox,
    box_from_patch,
    box_to_patch,
    clamp_box,
    crop_resample,
    expand_box,
    min_max_enclose,
    points_from_patch,
    points_to_patch,
    to_gray,
)
from .matcher import MatchResult, match_anchor
from .template import (
    CONTEXT_MARGIN,
    TEMPLATE_SIZE,
    TemplateState,
    encode_inner,
    fuse_features,
    grid_points,
    resize_confidence,
    resize_occlusion,
    scale_ratio,
    warp_template,
)

__all__ = [
    "Mode",
    "Status",
    "TrackStatus",
    "TrackerConfig",
    "TrackerState",
    "TrackResult",
    "init",
    "step",
    "track_sequence",
    "WORK_SIZE",
    "MIN_BOX",
    "LOST_AFTER",
]

WORK_SIZE = 256  # search patches are resampled to WORK_SIZE x WORK_SIZE
MIN_BOX = 16.0  # px, smallest initial box
LOST_AFTER = 10  # consecutive frames with the box center outside the frame
ADVECT_STEP = 4  # px between advected ROI points
MIN_ADVECTED = 0.5  # share of ROI points that must carry usable flow


class Mode(str, enum.Enum):
    INTER_FRAME_ONLY = "inter_frame_only"
    TEMPLATE_ONLY = "template_only"
    FULL = "full"


class Status(str, enum.Enum):
    """Internal tracker state."""

    TRACKING = "Tracking"
    OCCLUDED = "Occluded"
    LOST = "Lost"


class TrackStatus(str, enum.Enum):
    """Per-frame outcome."""

    TRACKED = "Tracked"
    OCCLUDED = "Occluded"


@dataclass(frozen=True)
class TrackerConfig:
    alpha: float = 0.5
    beta: float = 0.5
    flow_iters: int = 4
    match_iters: int = 8
    feature_channels: int = 32
    mode: Mode = Mode.FULL
    search_factor: float = 4.0
    roi_factor: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        for name in ("alpha", "beta"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")
        for name in ("search_factor", "roi_factor"):
            if not getattr(self, name) > 1.0:
                raise ValueError(f"{name} must be > 1")
        for name in ("flow_iters", "match_iters", "feature_channels"):
            val = getattr(self, name)
            if isinstance(val, bool) or int(val) != val or val < 1:
                raise ValueError(f"{name} must be a positive integer")
            object.__setattr__(self, name, int(val))

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_dict(cls, data: dict) -> "TrackerConfig":
        unknown = set(data) - set(cls.field_names())
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in self.field_names()}
        out["mode"] = self.mode.value
        return out


@dataclass
class TrackResult:
    frame_index: int
    bbox: BBox | None
    status: TrackStatus
    occlusion_fraction: float
    match_confidence: float

    def __post_init__(self):
        if (self.bbox is not None) != (self.status == TrackStatus.TRACKED):
            raise ValueError("bbox must be present exactly when the frame is tracked")


@dataclass
class TrackerState:
    template: TemplateState
    prev_bbox: BBox
    prev_roi: BBox
    prev_patch: np.ndarray  # previous target at the template size, context border included
    prev_features: np.ndarray  # encoded previous ROI (target in its central half)
    frame_index: int
    status: Status
    config: TrackerConfig
    frame_shape: tuple[int, int]
    reference_frame: np.ndarray  # last frame with a prediction; flow starts here
    init_box: BBox
    outside_count: int = 0
    backend: FlowEstimator = field(default_factory=CorrelationFlow)


# ---------------------------------------------------------------------------
# helpers

def _roi_size(roi: BBox, target: BBox) -> tuple[int, int]:
    """ROI raster size that maps ``target``-sized regions onto the template size."""
    sx = TEMPLATE_SIZE / target.w
    sy = TEMPLATE_SIZE / target.h
    out_w = max(int(round(roi.w * sx / STRIDE)) * STRIDE, TEMPLATE_SIZE)
    out_h = max(int(round(roi.h * sy / STRIDE)) * STRIDE, TEMPLATE_SIZE)
    return out_w, out_h


def _encode_roi(frame: np.ndarray, roi: BBox, target: BBox, channels: int) -> tuple[np.ndarray, tuple[int, int], np.ndarray]:
    size = _roi_size(roi, target)
    raster = crop_resample(frame, roi, *size)
    return encode(raster, channels), size, raster


def _roi_points(roi: BBox) -> np.ndarray:
    """Every ``ADVECT_STEP``-th pixel of ``roi`` plus its four corners, as continuous coordinates."""
    xs = np.arange(roi.x, roi.x2, ADVECT_STEP)
    ys = np.arange(roi.y, roi.y2, ADVECT_STEP)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    corners = np.array([[roi.x, roi.y], [roi.x2, roi.y], [roi.x, roi.y2], [roi.x2, roi.y2]])
    return np.concatenate([grid, corners], axis=0)


def _advect(points: np.ndarray, flow: FlowField, usable: np.ndarray, search: BBox) -> tuple[np.ndarray, np.ndarray]:
    """Move frame points by the search-patch flow; also report which points had usable flow."""
    size = (WORK_SIZE, WORK_SIZE)
    local = points_to_patch(points, search, size)
    uv, inside = sample_flow(flow, local)
    ix = np.clip(local[..., 0].astype(np.intp), 0, WORK_SIZE - 1)
    iy = np.clip(local[..., 1].astype(np.intp), 0, WORK_SIZE - 1)
    ok = inside & usable[iy, ix]
    return points_from_patch(local + uv, search, size), ok


def _min_max_advected(points: np.ndarray, flow: FlowField, usable: np.ndarray, search: BBox) -> BBox:
    moved, ok = _advect(points, flow, usable, search)
    # points without a usable match would drag the enclosure anywhere; drop them
    # as long as enough of the region survives
    if np.count_nonzero(ok) >= MIN_ADVECTED * len(ok):
        moved = moved[ok]
    return min_max_enclose(moved)


def _template_node_positions(state: TrackerState) -> np.ndarray:
    """Frame positions of the template grid nodes after the accumulated flow."""
    b0 = state.init_box
    nodes = grid_points(state.template.g.shape) + state.template.g.uv
    return np.stack([b0.x + nodes[..., 0] * (b0.w / TEMPLATE_SIZE),
                     b0.y + nodes[..., 1] * (b0.h / TEMPLATE_SIZE)], axis=-1)


def _advance_template_flow(state: TrackerState, flow: FlowField, search: BBox) -> FlowField:
    """``G_t = G_{t-1} + V(x0 + G_{t-1})`` with ``V`` expressed in template pixels."""
    b0 = state.init_box
    size = (WORK_SIZE, WORK_SIZE)
    local = points_to_patch(_template_node_positions(state), search, size)
    uv, inside = sample_flow(flow, local)
    # search-patch pixels -> frame pixels -> template pixels
    du = uv[..., 0] * (search.w / WORK_SIZE) * (TEMPLATE_SIZE / b0.w)
    dv = uv[..., 1] * (search.h / WORK_SIZE) * (TEMPLATE_SIZE / b0.h)
    g = state.template.g
    return FlowField(g.uv + np.stack([du, dv], axis=-1), g.valid & inside)


def _target_patch(frame: np.ndarray, b: BBox) -> np.ndarray:
    """``b`` resampled to the template size, with the context border around it."""
    m = CONTEXT_MARGIN
    sx, sy = b.w / TEMPLATE_SIZE, b.h / TEMPLATE_SIZE
    region = BBox(b.x - m * sx, b.y - m * sy, b.w + 2 * m * sx, b.h + 2 * m * sy)
    n = TEMPLATE_SIZE + 2 * m
    return crop_resample(frame, region, n, n)


def _check_frame(state: TrackerState, frame: np.ndarray) -> np.ndarray:
    gray = to_gray(frame)
    if gray.shape != state.frame_shape:
        raise ValueError(f"frame dimensions {gray.shape} differ from the initial {state.frame_shape}")
    return gray


# ---------------------------------------------------------------------------
# public API

def init(frame0: np.ndarray, b0: BBox, config: TrackerConfig | None = None,
         backend: FlowEstimator | None = None) -> TrackerState:
    config = config or TrackerConfig()
    gray = to_gray(frame0)
    h, w = gray.shape
    if not b0.inside(w, h):
        raise ValueError("box outside frame")
    if b0.w < MIN_BOX or b0.h < MIN_BOX:
        raise ValueError("box too small")
    p0 = _target_patch(gray, b0)
    template = TemplateState.from_patch(p0, config.feature_channels, CONTEXT_MARGIN)
    roi = expand_box(b0, config.roi_factor, (w, h))
    roi_feats = _encode_roi(gray, roi, b0, config.feature_channels)[0]
    return TrackerState(
        template=template,
        prev_bbox=b0,
        prev_roi=roi,
        prev_patch=p0,
        prev_features=roi_feats,
        frame_index=0,
        status=Status.TRACKING,
        config=config,
        frame_shape=(h, w),
        reference_frame=gray,
        init_box=b0,
        backend=backend if backend is not None else CorrelationFlow(),
    )


def step(state: TrackerState, frame: np.ndarray) -> TrackResult:
    """Advance ``state`` by one frame and return the prediction for it."""
    if state.status == Status.LOST:
        raise RuntimeError("tracker lost")
    gray = _check_frame(state, frame)
    cfg = state.config
    h, w = state.frame_shape
    bounds = (w, h)
    index = state.frame_index + 1
    prev = state.prev_bbox

    # (1) search patches around the previous box, both frames resampled alike
    search = expand_box(prev, cfg.search_factor, bounds)
    size = (WORK_SIZE, WORK_SIZE)
    p_prev = crop_resample(state.reference_frame, search, *size)
    p_cur = crop_resample(gray, search, *size)

    # (2) flow both ways, (3) occlusion gate over the previous box
    pair = estimate_flow_pair(p_prev, p_cur, cfg.flow_iters, state.backend)
    occ = fb_occlusion(pair.forward, pair.backward)
    prev_local = box_to_patch(prev, search, size)
    frac = occlusion_fraction(occ, prev_local)
    if frac > cfg.beta:
        # no prediction; template, reference frame and previous box stay frozen.
        # A target leaving the frame also trips the gate, so its advected
        # center still counts towards losing it.
        rows, cols = _box_window(prev_local)
        shift = np.median(pair.forward.uv[rows, cols].reshape(-1, 2), axis=0)
        moved = points_from_patch(np.array([prev_local.center.u, prev_local.center.v]) + shift, search, size)
        _count_outside(state, float(moved[0]), float(moved[1]))
        state.frame_index = index
        state.status = Status.LOST if state.outside_count >= LOST_AFTER else Status.OCCLUDED
        return TrackResult(index, None, TrackStatus.OCCLUDED, frac, 0.0)

    usable = ~occ
    if cfg.mode == Mode.INTER_FRAME_ONLY:
        raw_box = _min_max_advected(_roi_points(prev), pair.forward, usable, search)
        confidence = float(np.mean(pair.conf_forward[_occupied_mask(prev_local)]))
        match = None
    else:
        roi_prev = expand_box(prev, cfg.roi_factor, bounds)
        if cfg.mode == Mode.TEMPLATE_ONLY:
            roi = roi_prev
        else:
            roi = clamp_box(_min_max_advected(_roi_points(roi_prev), pair.forward, usable, search), bounds)

        # previous target and its reliability, resampled to the template grid
        fh, fw = state.template.f0.shape[:2]
        rows, cols = _box_window(prev_local)
        u = resize_confidence(pair.conf_forward[rows, cols], (fh, fw))
        o = resize_occlusion(occ[rows, cols], (fh, fw))
        f_prev = encode_inner(state.prev_patch, cfg.feature_channels, CONTEXT_MARGIN)

        m = CONTEXT_MARGIN
        if cfg.mode == Mode.TEMPLATE_ONLY:
            f_fused = state.template.f0
            t_img = state.template.p0
        else:
            g = _advance_template_flow(state, pair.forward, search)
            state.template.g = g
            try:
                state.template.scale = scale_ratio(g, state.template.center)
            except ValueError:
                state.template.reset_flow()
            p_warp = warp_template(state.template)
            f_warp = encode_inner(p_warp, cfg.feature_channels, m)
            f_fused = fuse_features(f_warp, f_prev, u, o, cfg.alpha)
            t_img = p_warp

        f_roi, roi_size, roi_img = _encode_roi(gray, roi, prev, cfg.feature_channels)
        init_local = BBox(roi_size[0] / 4.0, roi_size[1] / 4.0, roi_size[0] / 2.0, roi_size[1] / 2.0)
        match = match_anchor(f_fused, f_roi, state.prev_features, init_local, cfg.match_iters,
                             template_image=t_img, roi_image=roi_img, template_margin=m)
        raw_box = box_from_patch(match.bbox, roi, roi_size)
        confidence = match.confidence
        state.prev_roi = roi
        state.prev_features = f_roi

    # (8) bookkeeping; the stored box is kept inside the frame
    _count_outside(state, raw_box.center.u, raw_box.center.v)
    box = clamp_box(raw_box, bounds)
    state.prev_bbox = box
    state.prev_patch = _target_patch(gray, box)
    state.reference_frame = gray
    state.frame_index = index
    state.status = Status.LOST if state.outside_count >= LOST_AFTER else Status.TRACKING
    if match is None:
        state.prev_roi = expand_box(box, cfg.roi_factor, bounds)
        state.prev_features = _encode_roi(gray, state.prev_roi, box, cfg.feature_channels)[0]
    return TrackResult(index, box, TrackStatus.TRACKED, frac, confidence)


def _count_outside(state: TrackerState, cu: float, cv: float) -> None:
    h, w = state.frame_shape
    state.outside_count = 0 if (0 <= cu <= w and 0 <= cv <= h) else state.outside_count + 1


def _box_window(b: BBox) -> tuple[slice, slice]:
    """Pixel rows/columns of a search patch covered by ``b`` (at least one pixel)."""
    j0 = int(np.clip(np.floor(b.x), 0, WORK_SIZE - 1))
    i0 = int(np.clip(np.floor(b.y), 0, WORK_SIZE - 1))
    j1 = int(np.clip(np.ceil(b.x2), j0 + 1, WORK_SIZE))
    i1 = int(np.clip(np.ceil(b.y2), i0 + 1, WORK_SIZE))
    return slice(i0, i1), slice(j0, j1)


def _occupied_mask(b: BBox) -> np.ndarray:
    mask = np.zeros((WORK_SIZE, WORK_SIZE), dtype=bool)
    rows, cols = _box_window(b)
    mask[rows, cols] = True
    return mask


def track_sequence(frames: Iterable[np.ndarray], b0: BBox, config: TrackerConfig | None = None,
                   backend: FlowEstimator | None = None) -> list[TrackResult]:
    """Initialize on the first frame and step through the rest; one result per later frame."""
    it = iter(frames)
    try:
        first = next(it)
    except StopIteration:
        raise ValueError("need at least 2 frames") from None
    state = init(first, b0, config, backend)
    results = [step(state, f) for f in it]
    if not results:
        raise ValueError("need at least 2 frames")
    return results
