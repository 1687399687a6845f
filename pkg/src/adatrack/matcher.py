"""Two-corner template matching inside the coarse region of interest.

The template's cells are laid over the ROI feature map inside an initial box.
Their displacement is never free: every cell moves by the blend of the
top-left and bottom-right corner displacements, ``u`` blended by the cell's
horizontal position and ``v`` by its vertical position.  Each round every
cell proposes a step to the sub-cell peak of its (patch-aggregated)
correlation neighborhood and the two corner updates are fitted to those
proposals by weighted least squares.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .features import STRIDE
from .flow import PERFECT_MATCH, _lookup, aggregate_cost, build_cost_volume, subcell_peak_step
from .geometry import BBox, Point2, bilinear_sample, to_gray

__all__ = ["MatchResult", "match_anchor", "interpolate_corner_flow", "corner_fractions", "refine_corners"]

LOOKUP_RADIUS = 4
STOP_DELTA = 0.05  # cells
BACKTRACK = (1.0, 0.5, 0.25)
MIN_BOX = 1.0  # px
SUPPORT = 2  # cells
PHOTO_ITERS = 10
PHOTO_SIGMA = 6.0  # px, low-pass removed before photometric refinement
PHOTO_MAX_SHIFT = 0.5 * STRIDE  # px, largest corner correction the refinement may apply


@dataclass
class MatchResult:
    bbox: BBox
    corner_flow_tl: Point2
    corner_flow_br: Point2
    confidence: float
    iterations_run: int
    history: list[float] = field(default_factory=list)  # mean template correlation per round


def corner_fractions(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Relative position ``(s, t)`` in ``(0, 1)`` of every cell center of a ``shape`` grid."""
    h, w = shape
    s = (np.arange(w) + 0.5) / w
    t = (np.arange(h) + 0.5) / h
    return np.broadcast_to(s[None, :], (h, w)), np.broadcast_to(t[:, None], (h, w))


def interpolate_corner_flow(tl: tuple[float, float], br: tuple[float, float],
                            s: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Flow at relative position ``(s, t)``: ``u`` blends the corners by ``s``, ``v`` by ``t``."""
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    u = (1.0 - s) * tl[0] + s * br[0]
    v = (1.0 - t) * tl[1] + t * br[1]
    return np.stack(np.broadcast_arrays(u, v), axis=-1)


def _fit_axis(d: np.ndarray, frac: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    """Weighted least squares for ``d ~ (1 - frac) * a + frac * b``."""
    p = 1.0 - frac
    a11 = np.sum(w * p * p)
    a12 = np.sum(w * p * frac)
    a22 = np.sum(w * frac * frac)
    b1 = np.sum(w * p * d)
    b2 = np.sum(w * frac * d)
    det = a11 * a22 - a12 * a12
    if det <= 1e-12 * max(a11 * a22, 1e-300):
        # all weight on one column of cells: fall back to a common shift
        tot = np.sum(w)
        m = float(np.sum(w * d) / tot) if tot > 0 else 0.0
        return m, m
    return float((a22 * b1 - a12 * b2) / det), float((a11 * b2 - a12 * b1) / det)


def _context_weights(f_template: np.ndarray, f_context: np.ndarray | None) -> np.ndarray:
    """Half weight for template cells that disagree with the previous target context."""
    th, tw = f_template.shape[:2]
    if f_context is None or f_context.size == 0:
        return np.ones((th, tw))
    ch, cw = f_context.shape[:2]
    # the previous target occupies the central half of the previous ROI
    xs = cw / 4.0 + (np.arange(tw) + 0.5) * (cw / 2.0) / tw - 0.5
    ys = ch / 4.0 + (np.arange(th) + 0.5) * (ch / 2.0) / th - 0.5
    ctx = bilinear_sample(f_context, xs[None, :], ys[:, None])
    sim = np.sum(ctx * f_template, axis=-1)
    return np.where(sim < np.median(sim), 0.5, 1.0)


def _bandpass(img: np.ndarray) -> np.ndarray:
    img = to_gray(img)
    return img - ndimage.gaussian_filter(img, PHOTO_SIGMA, mode="nearest")


def _photo_cost(resid: np.ndarray, inside: np.ndarray) -> float:
    n = np.count_nonzero(inside)
    return float(np.sum((resid * inside) ** 2) / n) if n else np.inf


def refine_corners(template: np.ndarray, image: np.ndarray, box: BBox,
                   iters: int = PHOTO_ITERS, margin: int = 0) -> tuple[BBox, float, float]:
    """Gauss-Newton on the four box edges so that ``image`` inside ``box`` matches ``template``.

    Template pixel ``(x, y)`` sits at relative position ``(s, t)`` in the box,
    so its image position is linear in the edges; the photometric residual is
    taken between band-passed intensities.  Returns ``(box, cost_before,
    cost_after)`` with the mean squared residual; the box is returned
    unchanged if the refinement does not lower the cost or runs away.
    ``margin`` pixels of context around ``template`` are used for filtering
    only.
    """
    tpl = _bandpass(template)
    if margin:
        tpl = tpl[margin:-margin, margin:-margin]
    img = _bandpass(image)
    th, tw = tpl.shape
    ih, iw = img.shape
    s = ((np.arange(tw) + 0.5) / tw)[None, :]
    t = ((np.arange(th) + 0.5) / th)[:, None]
    start = np.array(box.corners(), dtype=np.float64)
    edges = start.copy()

    def residual(e):
        xs = e[0] + s * (e[2] - e[0]) - 0.5
        ys = e[1] + t * (e[3] - e[1]) - 0.5
        xs, ys = np.broadcast_arrays(xs, ys)
        inside = ((xs >= 0) & (xs <= iw - 1) & (ys >= 0) & (ys <= ih - 1)).astype(np.float64)
        return bilinear_sample(img, xs, ys) - tpl, xs, ys, inside

    r, xs, ys, inside = residual(edges)
    before = cost = _photo_cost(r, inside)
    gy_img, gx_img = np.gradient(img)
    for _ in range(iters):
        gx = bilinear_sample(gx_img, xs, ys) * inside
        gy = bilinear_sample(gy_img, xs, ys) * inside
        jac = np.stack([gx * (1.0 - s), gy * (1.0 - t), gx * s, gy * t], axis=-1).reshape(-1, 4)
        a = jac.T @ jac
        b = jac.T @ (r * inside).ravel()
        a += 1e-6 * np.trace(a) * np.eye(4) + 1e-12 * np.eye(4)
        step = -np.linalg.solve(a, b)
        trial = edges + step
        if np.max(np.abs(trial - start)) > PHOTO_MAX_SHIFT or trial[2] - trial[0] < MIN_BOX or trial[3] - trial[1] < MIN_BOX:
            break
        r_new, xs_new, ys_new, in_new = residual(trial)
        c_new = _photo_cost(r_new, in_new)
        if not c_new < cost:
            break
        edges, r, xs, ys, inside, cost = trial, r_new, xs_new, ys_new, in_new, c_new
        if np.max(np.abs(step)) < 1e-3:
            break
    return BBox.from_corners(*edges), before, cost


def match_anchor(f_template: np.ndarray, f_roi: np.ndarray, f_context: np.ndarray | None,
                 init_box: BBox, iters: int = 8, template_image: np.ndarray | None = None,
                 roi_image: np.ndarray | None = None, template_margin: int = 0) -> MatchResult:
    """Locate the template inside the ROI feature map, starting from ``init_box`` (ROI pixels).

    With ``template_image`` and ``roi_image`` (the ROI raster the features were
    encoded from) the feature-level box is polished photometrically by
    :func:`refine_corners`; ``template_margin`` is the context border of
    ``template_image``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    th, tw = f_template.shape[:2]
    rh, rw = f_roi.shape[:2]
    if th > rh or tw > rw:
        raise ValueError("template exceeds search region")
    raw = build_cost_volume(f_template, f_roi, 1).levels[0]
    vol = raw.reshape(th * tw, rh, rw)
    agg = aggregate_cost(raw, SUPPORT, SUPPORT).reshape(th * tw, rh + 2 * SUPPORT, rw + 2 * SUPPORT)
    s, t = corner_fractions((th, tw))
    # template cell centers laid over init_box, as ROI cell index coordinates
    base_x = (init_box.x + s * init_box.w) / STRIDE - 0.5
    base_y = (init_box.y + t * init_box.h) / STRIDE - 0.5
    ctx_w = _context_weights(f_template, f_context)

    tl = np.zeros(2)
    br = np.zeros(2)

    def positions():
        flow = interpolate_corner_flow(tl, br, s, t) / STRIDE
        return (base_x + flow[..., 0]).ravel(), (base_y + flow[..., 1]).ravel()

    def mean_corr():
        cx, cy = positions()
        return float(np.mean(_lookup(vol, cx, cy, 0)[:, 0, 0]))

    history = [mean_corr()]
    run = 0
    if not np.any(vol):
        return MatchResult(init_box, Point2(0.0, 0.0), Point2(0.0, 0.0), 0.0, 0, history)
    k = 2 * LOOKUP_RADIUS + 1
    for _ in range(iters):
        run += 1
        cx, cy = positions()
        samples = _lookup(agg, cx + SUPPORT, cy + SUPPORT, LOOKUP_RADIUS).reshape(th, tw, k, k)
        delta, peak = subcell_peak_step(samples)
        # cells already sitting on a perfect match stay put
        exact = _lookup(vol, cx, cy, 0)[:, 0, 0].reshape(th, tw) >= PERFECT_MATCH
        delta = np.where(exact[..., None], 0.0, delta)
        w = np.maximum(peak, 0.0) * ctx_w
        du = _fit_axis(delta[..., 0], s, w)
        dv = _fit_axis(delta[..., 1], t, w)
        d_tl = np.array([du[0], dv[0]])
        d_br = np.array([du[1], dv[1]])
        # backtrack along the proposed update until the template correlation does not drop
        start_tl, start_br = tl, br
        for shrink in BACKTRACK:
            tl = start_tl + shrink * d_tl * STRIDE
            br = start_br + shrink * d_br * STRIDE
            corr = mean_corr()
            if corr >= history[-1]:
                break
        else:
            tl, br = start_tl, start_br
            break
        history.append(corr)
        if shrink * max(np.max(np.abs(d_tl)), np.max(np.abs(d_br))) < STOP_DELTA:
            break

    # sub-cell steps are biased on the asymmetric peaks of a cell-aligned exact
    # copy; if the nearest cell-aligned placement matches perfectly, take it
    cur_tl, cur_br = tl, br
    lo = np.array([init_box.x, init_box.y])
    hi = np.array([init_box.x2, init_box.y2])
    tl = np.round((lo + cur_tl) / STRIDE) * STRIDE - lo
    br = np.round((hi + cur_br) / STRIDE) * STRIDE - hi
    snapped = mean_corr()
    if snapped >= PERFECT_MATCH and snapped >= history[-1]:
        history.append(snapped)
    else:
        tl, br = cur_tl, cur_br

    x1, y1 = init_box.x + tl[0], init_box.y + tl[1]
    x2, y2 = init_box.x2 + br[0], init_box.y2 + br[1]
    if x2 - x1 < MIN_BOX or y2 - y1 < MIN_BOX:
        # collapsed corners carry no usable box; keep the initialization
        return MatchResult(init_box, Point2(0.0, 0.0), Point2(0.0, 0.0), 0.0, run, history)
    cx, cy = positions()
    conf = float(np.mean(np.clip(_lookup(vol, cx, cy, 0)[:, 0, 0], 0.0, 1.0)))
    if template_image is not None and roi_image is not None and history[-1] < PERFECT_MATCH:
        refined, _, _ = refine_corners(template_image, roi_image, BBox.from_corners(x1, y1, x2, y2),
                                        margin=template_margin)
        x1, y1, x2, y2 = refined.corners()
        tl = np.array([x1 - init_box.x, y1 - init_box.y])
        br = np.array([x2 - init_box.x2, y2 - init_box.y2])
    return MatchResult(BBox.from_corners(x1, y1, x2, y2), Point2(float(tl[0]), float(tl[1])),
                       Point2(float(br[0]), float(br[1])), conf, run, history)
