"""On-disk sequences: numbered PNG frames, box CSVs, flow dumps and ``meta.json``."""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .evaluation import GroundTruth
from .flow import write_flow
from .geometry import BBox
from .synth import SynthFrame, SynthSpec
from .tracker import TrackResult, TrackStatus

__all__ = [
    "SequenceOnDisk",
    "FRAME_PATTERN",
    "write_synth_sequence",
    "load_frame",
    "save_frame",
    "format_box_fields",
    "write_predictions",
    "read_predictions",
    "write_ground_truth",
    "read_ground_truth",
    "parse_box",
]

FRAME_PATTERN = "{:06d}.png"
PRED_HEADER = ["frame", "x", "y", "w", "h", "status", "occ_fraction", "confidence"]
GT_HEADER = ["frame", "x", "y", "w", "h", "visible"]
_FRAME_RE = re.compile(r"^(\d{6})\.png$")
_STATUS_CODE = {TrackStatus.TRACKED: "T", TrackStatus.OCCLUDED: "O"}


def _num(v: float) -> str:
    # fixed 3 decimals, dot separator, never "-0.000"
    s = f"{float(v):.3f}"
    return "0.000" if s == "-0.000" else s


def parse_box(text: str) -> BBox:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ValueError(f"box must be x,y,w,h, got {text!r}")
    try:
        return BBox(*(float(p) for p in parts))
    except ValueError as exc:
        raise ValueError(f"invalid box {text!r}: {exc}") from None


def load_frame(path: str | Path) -> np.ndarray:
    """Read an 8-bit frame as floats in ``[0, 1]`` (grayscale or RGB)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB") if "A" in im.mode or im.mode == "P" else im.convert("L")
        return np.asarray(im, dtype=np.float64) / 255.0


def save_frame(path: str | Path, img: np.ndarray) -> None:
    data = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


@dataclass
class SequenceOnDisk:
    root: Path
    frame_paths: list[Path]
    width: int
    height: int

    @classmethod
    def open(cls, root: str | Path) -> "SequenceOnDisk":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"sequence directory {root} does not exist")
        indexed = sorted((int(m.group(1)), p) for p in root.iterdir() if (m := _FRAME_RE.match(p.name)))
        if not indexed:
            raise FileNotFoundError(f"no frames named {FRAME_PATTERN.format(0)} ... in {root}")
        for k, (idx, _) in enumerate(indexed):
            if idx != k:
                raise FileNotFoundError(f"missing frame {FRAME_PATTERN.format(k)} in {root}")
        paths = [p for _, p in indexed]
        meta_path = root / "meta.json"
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            if int(meta.get("frames", len(paths))) != len(paths):
                raise FileNotFoundError(f"meta.json lists {meta['frames']} frames but {len(paths)} are present")
        with Image.open(paths[0]) as im:
            width, height = im.size
        for p in paths[1:]:
            with Image.open(p) as im:
                if im.size != (width, height):
                    raise FileNotFoundError(f"{p.name}: frame size {im.size[0]}x{im.size[1]} differs from {width}x{height}")
        return cls(root, paths, width, height)

    def __len__(self) -> int:
        return len(self.frame_paths)

    def frames(self) -> Iterator[np.ndarray]:
        for p in self.frame_paths:
            img = load_frame(p)
            if img.shape[:2] != (self.height, self.width):
                raise ValueError(f"{p.name}: frame size {img.shape[1]}x{img.shape[0]} differs from {self.width}x{self.height}")
            yield img

    def frame(self, index: int) -> np.ndarray:
        return load_frame(self.frame_paths[index])

    @property
    def gt_path(self) -> Path:
        return self.root / "boxes_gt.csv"


# ---------------------------------------------------------------------------
# CSV trajectories

def format_box_fields(b: BBox | None) -> list[str]:
    return ["", "", "", ""] if b is None else [_num(v) for v in b.as_tuple()]


def write_predictions(path: str | Path, results: Sequence[TrackResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER)
        for r in results:
            w.writerow([str(r.frame_index), *format_box_fields(r.bbox), _STATUS_CODE[r.status],
                        _num(r.occlusion_fraction), _num(r.match_confidence)])


def _rows(path: str | Path, header: list[str]) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row and any(c.strip() for c in row)]
    if rows and [c.strip() for c in rows[0]] == header:
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{path}: no records")
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"{path}: expected {len(header)} fields, got {len(row)}: {row}")
    return rows


def read_predictions(path: str | Path) -> list[TrackResult]:
    out = []
    for row in _rows(path, PRED_HEADER):
        frame, x, y, w, h, status, occ, conf = (c.strip() for c in row)
        if status == "T":
            out.append(TrackResult(int(frame), BBox(float(x), float(y), float(w), float(h)),
                                   TrackStatus.TRACKED, float(occ), float(conf)))
        elif status == "O":
            if any((x, y, w, h)):
                raise ValueError(f"{path}: occluded frame {frame} must have empty box fields")
            out.append(TrackResult(int(frame), None, TrackStatus.OCCLUDED, float(occ), float(conf)))
        else:
            raise ValueError(f"{path}: unknown status {status!r} in frame {frame}")
    return out


def write_ground_truth(path: str | Path, boxes: Sequence[GroundTruth]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GT_HEADER)
        for k, g in enumerate(boxes):
            w.writerow([str(k), *format_box_fields(g.bbox), "1" if g.visible else "0"])


def read_ground_truth(path: str | Path) -> dict[int, GroundTruth]:
    out = {}
    for row in _rows(path, GT_HEADER):
        frame, x, y, w, h, visible = (c.strip() for c in row)
        if visible not in ("0", "1"):
            raise ValueError(f"{path}: visible must be 0 or 1, got {visible!r}")
        out[int(frame)] = GroundTruth(BBox(float(x), float(y), float(w), float(h)), visible == "1")
    return out


# ---------------------------------------------------------------------------
# synthetic corpora

def write_synth_sequence(out_dir: str | Path, spec: SynthSpec, frames: Sequence[SynthFrame], beta: float = 0.5) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flow_dir = out / "flow"
    flow_dir.mkdir(exist_ok=True)
    for k, fr in enumerate(frames):
        save_frame(out / FRAME_PATTERN.format(k), fr.image)
        if k > 0:
            write_flow(flow_dir / f"{k:06d}.adfl", fr.gt_flow_from_prev)
    write_ground_truth(out / "boxes_gt.csv", [GroundTruth(fr.gt_box, fr.visible(beta)) for fr in frames])
    h, w = frames[0].image.shape[:2]
    meta = {"width": w, "height": h, "frames": len(frames), "generator": spec.to_dict()}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out
