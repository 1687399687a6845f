"""Synthetic deformable sequences with analytic ground truth.

A reference texture is pushed through a per-frame forward warp

    M_t(xi) = c + zoom_t * R_t (xi + D_t(xi) - c) + shift_t

(similarity about the frame center composed with a smooth deformation
``D_t`` that vanishes at ``t = 0``), then lit with a gain/bias drift, and
finally an optional occluder sprite is composited on top.  Ground-truth flow
between consecutive frames is ``M_t(M_{t-1}^{-1}(x)) - x``, evaluated exactly
(the inverse warp is solved with Newton iterations to ~1e-10 px).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage

from .flow import FlowField, occlusion_fraction
from .geometry import BBox, bilinear_sample, min_max_enclose

__all__ = [
    "Motion",
    "Deformation",
    "Illumination",
    "Occluder",
    "SynthSpec",
    "SynthFrame",
    "Warp",
    "generate",
    "perlin",
    "make_texture",
    "augment",
    "render_pair",
    "box_boundary",
    "benchmark_spec",
    "BENCHMARK_SEEDS",
]

BENCHMARK_SEEDS = tuple(range(10))


@dataclass
class Motion:
    shift: tuple[float, float] = (0.0, 0.0)  # px / frame
    zoom: float = 1.0  # factor / frame
    rotation: float = 0.0  # deg / frame


@dataclass
class Deformation:
    kind: str = "sinusoid"  # "sinusoid" | "tps"
    amplitude: float = 0.0  # px
    period: float = 64.0  # spatial period, px
    temporal_period: float = 40.0  # frames
    points: int = 9  # thin-plate control points
    drift: float = 0.0  # px / frame for thin-plate control points


@dataclass
class Illumination:
    gain: float = 0.0  # multiplicative drift / frame
    bias: float = 0.0  # additive drift / frame


@dataclass
class Occluder:
    shape: str = "square"  # "square" | "disk"
    size: float = 40.0
    entry_frame: int = 0
    exit_frame: int | None = None
    velocity: tuple[float, float] = (0.0, 0.0)
    start: tuple[float, float] | None = None  # center at entry frame; defaults to the init box center

    def center(self, t: int, fallback: tuple[float, float]) -> tuple[float, float] | None:
        if t < self.entry_frame or (self.exit_frame is not None and t >= self.exit_frame):
            return None
        sx, sy = self.start if self.start is not None else fallback
        k = t - self.entry_frame
        return sx + k * self.velocity[0], sy + k * self.velocity[1]


@dataclass
class SynthSpec:
    seed: int = 0
    frames: int = 10
    size: tuple[int, int] = (256, 256)  # (width, height)
    texture: str = "perlin"  # "perlin" | "checker" | path to an image file
    motion: Motion = field(default_factory=Motion)
    deform: Deformation | None = None
    illumination: Illumination = field(default_factory=Illumination)
    occluder: Occluder | None = None
    init_box: BBox = field(default_factory=lambda: BBox(104.0, 104.0, 48.0, 48.0))

    def validate(self) -> None:
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        w, h = self.size
        if w < 16 or h < 16:
            raise ValueError("frame size must be at least 16x16")
        if self.motion.zoom <= 0:
            raise ValueError("zoom must be positive")
        if not self.init_box.inside(w, h):
            raise ValueError("init_box must lie inside the frame")
        d = self.deform
        if d is not None:
            if d.kind not in ("sinusoid", "tps"):
                raise ValueError(f"unknown deformation kind {d.kind!r}")
            limit = min(w, h) / 8.0
            if d.kind == "sinusoid":
                if d.period <= 0 or d.temporal_period <= 0:
                    raise ValueError("periods must be positive")
                # the Jacobian of xi + D stays invertible while A * 2pi / P < 1
                if abs(d.amplitude) > limit or abs(d.amplitude) * 2 * math.pi / d.period >= 0.9:
                    raise ValueError("deformation too large")
            else:
                if d.points < 3:
                    raise ValueError("thin-plate deformation needs at least 3 control points")
                if abs(d.drift) * (self.frames - 1) > limit:
                    raise ValueError("deformation too large")

    # -- JSON round trip --------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["init_box"] = list(self.init_box.as_tuple())
        out["size"] = list(self.size)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SynthSpec":
        known = {"seed", "frames", "size", "texture", "motion", "deform", "illumination", "occluder", "init_box"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown spec keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for key in ("seed", "frames", "texture"):
            if key in data:
                kw[key] = data[key]
        if "size" in data:
            kw["size"] = tuple(int(v) for v in data["size"])
        if "motion" in data:
            m = dict(data["motion"])
            if "shift" in m:
                m["shift"] = tuple(float(v) for v in m["shift"])
            kw["motion"] = Motion(**m)
        if data.get("deform") is not None:
            kw["deform"] = Deformation(**data["deform"])
        if "illumination" in data:
            kw["illumination"] = Illumination(**data["illumination"])
        if data.get("occluder") is not None:
            o = dict(data["occluder"])
            for key in ("velocity", "start"):
                if o.get(key) is not None:
                    o[key] = tuple(float(v) for v in o[key])
            kw["occluder"] = Occluder(**o)
        if "init_box" in data:
            kw["init_box"] = BBox(*(float(v) for v in data["init_box"]))
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class SynthFrame:
    image: np.ndarray
    gt_flow_from_prev: FlowField
    gt_occlusion: np.ndarray
    gt_box: BBox
    box_coverage: float = 0.0  # share of gt_box pixels hidden by the occluder

    def visible(self, beta: float = 0.5) -> bool:
        return self.box_coverage <= beta


# ---------------------------------------------------------------------------
# textures

def _lattice_hash(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    h = (ix.astype(np.int64) * 374761393 + iy.astype(np.int64) * 668265263 + seed * 2147483647) & 0xFFFFFFFF
    h = ((h ^ (h >> 13)) * 1274126177) & 0xFFFFFFFF
    return (h ^ (h >> 16)) & 0xFFFFFFFF


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


def perlin(x: np.ndarray, y: np.ndarray, spacing: float, seed: int = 0, period: int | None = None) -> np.ndarray:
    """Gradient noise with lattice ``spacing`` px; tiles every ``period`` lattice cells if given."""
    gx = np.asarray(x, dtype=np.float64) / spacing
    gy = np.asarray(y, dtype=np.float64) / spacing
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx = gx - x0
    fy = gy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    def grad_dot(ix, iy, dx, dy):
        if period is not None:
            ix = ix % period
            iy = iy % period
        ang = _lattice_hash(ix, iy, seed).astype(np.float64) * (2 * np.pi / 4294967296.0)
        return np.cos(ang) * dx + np.sin(ang) * dy

    n00 = grad_dot(x0, y0, fx, fy)
    n10 = grad_dot(x0 + 1, y0, fx - 1, fy)
    n01 = grad_dot(x0, y0 + 1, fx, fy - 1)
    n11 = grad_dot(x0 + 1, y0 + 1, fx - 1, fy - 1)
    u = _fade(fx)
    v = _fade(fy)
    return (n00 * (1 - u) + n10 * u) * (1 - v) + (n01 * (1 - u) + n11 * u) * v


PERLIN_OCTAVES = ((64.0, 1.0), (32.0, 0.55), (16.0, 0.3))


def make_texture(kind: str, seed: int = 0, period: int | None = None):
    """Return a callable ``tex(x, y) -> intensity`` evaluated at continuous coordinates.

    ``period`` (px) makes the Perlin texture tile, which the shift tests rely on.
    """
    if kind == "perlin":
        def tex(x, y):
            acc = np.zeros(np.broadcast(x, y).shape)
            for octave, (spacing, amp) in enumerate(PERLIN_OCTAVES):
                per = None if period is None else max(int(round(period / spacing)), 1)
                acc += amp * perlin(x, y, spacing, seed * 7919 + octave, per)
            return np.clip(0.5 + 0.42 * acc, 0.0, 1.0)
        return tex
    if kind == "checker":
        def tex(x, y):
            sx = np.tanh(3.0 * np.sin(np.pi * np.asarray(x) / 16.0))
            sy = np.tanh(3.0 * np.sin(np.pi * np.asarray(y) / 16.0))
            return 0.5 + 0.3 * sx * sy
        return tex
    path = Path(kind)
    if not path.exists():
        raise ValueError(f"unknown texture {kind!r}")
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    h, w = arr.shape

    def tex(x, y):
        # mirror-tile the image so every coordinate has a sample
        ix = np.mod(np.asarray(x) - 0.5, 2 * w)
        iy = np.mod(np.asarray(y) - 0.5, 2 * h)
        ix = np.where(ix > w - 1, np.maximum(2 * w - 1 - ix, 0.0), ix)
        iy = np.where(iy > h - 1, np.maximum(2 * h - 1 - iy, 0.0), iy)
        return bilinear_sample(arr, ix, iy)
    return tex


# ---------------------------------------------------------------------------
# warps

class _Sinusoid:
    def __init__(self, d: Deformation, rng: np.random.Generator):
        self.amp = d.amplitude
        self.k = 2 * np.pi / d.period
        self.omega = 2 * np.pi / d.temporal_period
        self.phase = rng.uniform(0, 2 * np.pi, size=2)

    def at(self, t: int):
        s = self.amp * math.sin(self.omega * t)
        k, (px, py) = self.k, self.phase

        def disp(x, y):
            return s * np.sin(k * y + px), s * np.sin(k * x + py)

        def jac(x, y):
            # d(xi + D)/d(xi) = [[1, a], [b, 1]]
            a = s * k * np.cos(k * y + px)
            b = s * k * np.cos(k * x + py)
            one = np.ones_like(a)
            return one, a, b, one
        return disp, jac


class _ThinPlate:
    def __init__(self, d: Deformation, rng: np.random.Generator, size: tuple[int, int]):
        w, h = size
        n = int(d.points)
        side = max(int(math.ceil(math.sqrt(n))), 2)
        gx, gy = np.meshgrid(np.linspace(0.15, 0.85, side) * w, np.linspace(0.15, 0.85, side) * h)
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)[:n]
        pts = pts + rng.uniform(-0.05, 0.05, size=pts.shape) * np.array([w, h])
        ang = rng.uniform(0, 2 * np.pi, size=n)
        speed = d.drift * rng.uniform(0.5, 1.0, size=n)
        self.pts = pts
        self.vel = np.stack([np.cos(ang) * speed, np.sin(ang) * speed], axis=1)
        self.scale = float(max(w, h))
        # shared TPS system: displacements only scale with t, so solve once
        p = pts / self.scale
        r2 = np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=-1)
        kmat = _tps_kernel(r2)
        ptmat = np.hstack([np.ones((n, 1)), p])
        lhs = np.zeros((n + 3, n + 3))
        lhs[:n, :n] = kmat
        lhs[:n, n:] = ptmat
        lhs[n:, :n] = ptmat.T
        rhs = np.zeros((n + 3, 2))
        rhs[:n] = self.vel
        self.coef = np.linalg.solve(lhs, rhs)

    def at(self, t: int):
        coef = self.coef * t
        n = self.pts.shape[0]
        p = self.pts / self.scale
        w_, a_ = coef[:n], coef[n:]

        def parts(x, y):
            qx = np.asarray(x) / self.scale
            qy = np.asarray(y) / self.scale
            dx = qx[..., None] - p[:, 0]
            dy = qy[..., None] - p[:, 1]
            return qx, qy, dx, dy

        def disp(x, y):
            qx, qy, dx, dy = parts(x, y)
            k = _tps_kernel(dx * dx + dy * dy)
            out = k @ w_ + a_[0] + qx[..., None] * a_[1] + qy[..., None] * a_[2]
            return out[..., 0], out[..., 1]

        def jac(x, y):
            qx, qy, dx, dy = parts(x, y)
            r2 = dx * dx + dy * dy
            g = np.where(r2 > 0, np.log(np.maximum(r2, 1e-300)) + 1.0, 0.0)  # dU/dr2 for U = r2 log r
            # derivatives in normalized coordinates; divide by the scale to get px / px
            gx = ((g * dx) @ w_ + a_[1]) / self.scale
            gy = ((g * dy) @ w_ + a_[2]) / self.scale
            return 1.0 + gx[..., 0], gy[..., 0], gx[..., 1], 1.0 + gy[..., 1]
        return disp, jac


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r = 0.5 * r2 * log(r2)
    return np.where(r2 > 0, 0.5 * r2 * np.log(np.maximum(r2, 1e-300)), 0.0)


class Warp:
    """Forward/inverse warp of a synthetic sequence at frame ``t``."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        w, h = spec.size
        self.center = np.array([w / 2.0, h / 2.0])
        rng = np.random.default_rng([spec.seed, 1])
        d = spec.deform
        if d is None or (d.kind == "sinusoid" and d.amplitude == 0) or (d.kind == "tps" and d.drift == 0):
            self.field = None
        elif d.kind == "sinusoid":
            self.field = _Sinusoid(d, rng)
        else:
            self.field = _ThinPlate(d, rng, spec.size)

    def _similarity(self, t: int):
        m = self.spec.motion
        z = m.zoom ** t
        th = math.radians(m.rotation * t)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        shift = np.array(m.shift, dtype=np.float64) * t
        return z, rot, shift

    def forward(self, t: int, xi: np.ndarray) -> np.ndarray:
        """Reference coordinates -> frame ``t`` coordinates; ``xi[..., (x, y)]``."""
        xi = np.asarray(xi, dtype=np.float64)
        p = xi
        if self.field is not None:
            disp, _ = self.field.at(t)
            dx, dy = disp(xi[..., 0], xi[..., 1])
            p = np.stack([xi[..., 0] + dx, xi[..., 1] + dy], axis=-1)
        z, rot, shift = self._similarity(t)
        return self.center + z * (p - self.center) @ rot.T + shift

    def inverse(self, t: int, x: np.ndarray, iters: int = 12) -> np.ndarray:
        """Frame ``t`` coordinates -> reference coordinates (Newton on the deformation)."""
        x = np.asarray(x, dtype=np.float64)
        z, rot, shift = self._similarity(t)
        q = self.center + ((x - shift - self.center) @ rot) / z
        if self.field is None:
            return q
        disp, jac = self.field.at(t)
        xi = q.copy()
        for _ in range(iters):
            dx, dy = disp(xi[..., 0], xi[..., 1])
            rx = xi[..., 0] + dx - q[..., 0]
            ry = xi[..., 1] + dy - q[..., 1]
            a, b, c, d = jac(xi[..., 0], xi[..., 1])
            det = a * d - b * c
            xi = xi - np.stack([(d * rx - b * ry) / det, (a * ry - c * rx) / det], axis=-1)
        return xi

    def min_jacobian_det(self, t: int, step: float = 8.0) -> float:
        if self.field is None:
            return 1.0
        w, h = self.spec.size
        gx, gy = np.meshgrid(np.arange(-w * 0.5, w * 1.5, step), np.arange(-h * 0.5, h * 1.5, step))
        a, b, c, d = self.field.at(t)[1](gx, gy)
        return float(np.min(a * d - b * c))


def box_boundary(b: BBox, n: int = 1000) -> np.ndarray:
    """``n`` points on the boundary of ``b`` (corners included), ``n/4`` per side."""
    k = max(n // 4, 1)
    s = np.linspace(0.0, 1.0, k, endpoint=False)
    top = np.stack([b.x + s * b.w, np.full(k, b.y)], axis=1)
    right = np.stack([np.full(k, b.x2), b.y + s * b.h], axis=1)
    bottom = np.stack([b.x2 - s * b.w, np.full(k, b.y2)], axis=1)
    left = np.stack([np.full(k, b.x), b.y2 - s * b.h], axis=1)
    return np.concatenate([top, right, bottom, left], axis=0)


def _sprite_mask(shape: tuple[int, int], center: tuple[float, float], occ: Occluder) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    px = xx + 0.5 - center[0]
    py = yy + 0.5 - center[1]
    half = occ.size / 2.0
    if occ.shape == "disk":
        return px * px + py * py <= half * half
    if occ.shape == "square":
        return (px >= -half) & (px < half) & (py >= -half) & (py < half)
    raise ValueError(f"unknown occluder shape {occ.shape!r}")


def _sprite_texture(shape: tuple[int, int], seed: int, t: int) -> np.ndarray:
    # fresh clutter every frame: an occluder surface no flow can follow
    rng = np.random.default_rng([seed, 2, t])
    noise = ndimage.gaussian_filter(rng.random(shape), 0.8, mode="nearest")
    lo, hi = noise.min(), noise.max()
    return 0.05 + 0.9 * (noise - lo) / max(hi - lo, 1e-12)


def generate(spec: SynthSpec) -> list[SynthFrame]:
    """Render ``spec.frames`` frames with ground-truth flow, occlusion and boxes."""
    spec.validate()
    w, h = spec.size
    warp = Warp(spec)
    if warp.field is not None:
        for t in range(spec.frames):
            if warp.min_jacobian_det(t) <= 0.1:
                raise ValueError("deformation too large")
    tex = make_texture(spec.texture, spec.seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pix = np.stack([xx + 0.5, yy + 0.5], axis=-1)
    boundary = box_boundary(spec.init_box)
    ref_boundary = warp.inverse(0, boundary)
    fallback = (spec.init_box.center.u, spec.init_box.center.v)

    frames: list[SynthFrame] = []
    prev_ref = None
    for t in range(spec.frames):
        ref = warp.inverse(t, pix)
        gain = 1.0 + spec.illumination.gain * t
        bias = spec.illumination.bias * t
        img = np.clip(gain * tex(ref[..., 0], ref[..., 1]) + bias, 0.0, 1.0)

        occ_mask = np.zeros((h, w), dtype=bool)
        if spec.occluder is not None:
            c = spec.occluder.center(t, fallback)
            if c is not None:
                occ_mask = _sprite_mask((h, w), c, spec.occluder)
                img = np.where(occ_mask, _sprite_texture((h, w), spec.seed, t), img)

        if prev_ref is None:
            flow = FlowField(np.zeros((h, w, 2)), np.zeros((h, w), dtype=bool))
        else:
            uv = warp.forward(t, prev_ref) - pix
            tgt = pix + uv
            valid = (tgt[..., 0] >= 0.5) & (tgt[..., 0] <= w - 0.5) & (tgt[..., 1] >= 0.5) & (tgt[..., 1] <= h - 0.5)
            flow = FlowField(uv, valid)
        box = min_max_enclose(warp.forward(t, ref_boundary))
        coverage = 0.0
        if occ_mask.any():
            try:
                coverage = occlusion_fraction(occ_mask, box)
            except ValueError:
                coverage = 0.0
        frames.append(SynthFrame(img, flow, occ_mask, box, coverage))
        prev_ref = ref
    return frames


def render_pair(tex, size: tuple[int, int], shift=(0.0, 0.0), zoom: float = 1.0, rotation: float = 0.0):
    """Two-frame helper: ``src`` is the texture, ``dst`` the texture moved by one similarity step.

    Returns ``(src, dst, gt_flow)`` with the flow defined on ``src`` pixels.
    """
    spec = SynthSpec(frames=2, size=size, motion=Motion(shift=tuple(shift), zoom=zoom, rotation=rotation),
                     init_box=BBox(0, 0, size[0], size[1]))
    warp = Warp(spec)
    w, h = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pix = np.stack([xx + 0.5, yy + 0.5], axis=-1)
    src = tex(pix[..., 0], pix[..., 1])
    ref = warp.inverse(1, pix)
    dst = tex(ref[..., 0], ref[..., 1])
    flow = FlowField(warp.forward(1, pix) - pix)
    return src, dst, flow


def augment(image: np.ndarray, box: BBox, shift=(0.0, 0.0), rotation: float = 0.0,
            gain: float = 1.0, bias: float = 0.0) -> tuple[np.ndarray, BBox]:
    """Shift/rotate (about the image center) and relight ``image``; returns the pseudo-GT box too."""
    h, w = image.shape[:2]
    spec = SynthSpec(frames=2, size=(w, h), motion=Motion(shift=tuple(shift), rotation=rotation),
                     init_box=BBox(0, 0, w, h))
    warp = Warp(spec)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pix = np.stack([xx + 0.5, yy + 0.5], axis=-1)
    ref = warp.inverse(1, pix)
    out = bilinear_sample(np.asarray(image, dtype=np.float64), ref[..., 0] - 0.5, ref[..., 1] - 0.5)
    out = np.clip(gain * out + bias, 0.0, 1.0)
    pseudo = min_max_enclose(warp.forward(1, box_boundary(box)))
    return out, pseudo


def benchmark_spec(seed: int, frames: int = 60) -> SynthSpec:
    """One sequence of the standard ten-seed benchmark suite.

    A 48 px target drifts 1.5 px/frame in a seeded direction while zooming,
    rotating (direction alternating with the seed) and deforming, so that the
    appearance drifts away from the first frame.
    """
    rng = np.random.default_rng([seed, 7])
    ang = rng.uniform(0.0, 2.0 * np.pi)
    return SynthSpec(
        seed=seed,
        frames=frames,
        size=(320, 240),
        motion=Motion(shift=(1.5 * math.cos(ang), 1.5 * math.sin(ang)), zoom=1.003,
                      rotation=0.3 if seed % 2 else -0.3),
        deform=Deformation(kind="sinusoid", amplitude=3.0, period=80.0, temporal_period=30.0),
        init_box=BBox(136.0, 96.0, 48.0, 48.0),
    )
