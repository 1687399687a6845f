"""``adatrack`` command line: synth, track, eval, overlay, selfcheck.

Exit codes: 0 success, 2 bad usage or input, 3 internal invariant violation.
``ADATRACK_THREADS`` caps the worker processes used when several sequences
are evaluated at once.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .evaluation import GroundTruth, Metrics2D, cycle_check, format_report, metric_suite
from .seqio import (
    SequenceOnDisk,
    parse_box,
    read_ground_truth,
    read_predictions,
    write_predictions,
    write_synth_sequence,
)
from .synth import SynthSpec, generate
from .tracker import Status, TrackerConfig, TrackResult, TrackStatus, init, step

__all__ = ["main", "build_parser", "UsageError"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INTERNAL = 3

PRED_COLOR = (255, 40, 40)
GT_COLOR = (40, 220, 40)
MARKER_COLOR = (255, 210, 0)
MARKER_SIZE = 10


class UsageError(Exception):
    """Bad arguments or unusable input files; maps to exit code 2."""


def _threads() -> int:
    raw = os.environ.get("ADATRACK_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ADATRACK_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("ADATRACK_THREADS must be >= 1")
    return n


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    try:
        data = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"spec file {args.spec} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"spec file {args.spec} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("spec file must hold a JSON object")
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(data)
        frames = generate(spec)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = write_synth_sequence(args.out, spec, frames)
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# track

def _load_config(args) -> TrackerConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a flat JSON object")
    for key, val in (("mode", args.mode), ("alpha", args.alpha), ("beta", args.beta), ("flow_iters", args.iters)):
        if val is not None:
            data[key] = val
    try:
        return TrackerConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad tracker config: {exc}") from None


def _open_sequence(path) -> SequenceOnDisk:
    try:
        return SequenceOnDisk.open(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def _init_box(args, seq: SequenceOnDisk):
    if args.init:
        try:
            return parse_box(args.init)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if seq.gt_path.exists():
        gt = read_ground_truth(seq.gt_path)
        if 0 in gt:
            return gt[0].bbox
    raise UsageError("no --init box given and no ground truth for frame 0")


def run_tracker(seq: SequenceOnDisk, b0, config: TrackerConfig) -> list[TrackResult]:
    if len(seq) < 2:
        raise UsageError("a sequence needs at least 2 frames")
    frames = seq.frames()
    try:
        state = init(next(frames), b0, config)
    except ValueError as exc:
        raise UsageError(f"init box invalid: {exc}") from None
    results = []
    for k, frame in enumerate(frames, start=1):
        if state.status == Status.LOST:
            # the box left the frame for good; report the rest as no-prediction frames
            results.append(TrackResult(k, None, TrackStatus.OCCLUDED, 0.0, 0.0))
            continue
        results.append(step(state, frame))
    return results


def cmd_track(args) -> int:
    seq = _open_sequence(args.sequence)
    config = _load_config(args)
    b0 = _init_box(args, seq)
    results = run_tracker(seq, b0, config)
    out = Path(args.out) if args.out else seq.root / "boxes_pred.csv"
    write_predictions(out, results)
    n_occ = sum(r.status == TrackStatus.OCCLUDED for r in results)
    print(f"tracked {len(results)} frames ({n_occ} without prediction) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def evaluate_files(pred_path: str, gt_path: str) -> Metrics2D:
    """Score one prediction CSV against one ground-truth CSV, matching rows by frame index."""
    try:
        pred = read_predictions(pred_path)
        gt = read_ground_truth(gt_path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    frames = [p.frame_index for p in pred]
    if len(set(frames)) != len(frames):
        raise UsageError(f"{pred_path}: duplicate frame indices")
    # the first frame's box is given to the tracker, so it is never predicted
    expected = sorted(k for k in gt if k != 0) if 0 not in frames else sorted(gt)
    if sorted(frames) != expected:
        raise UsageError(f"frame mismatch: {len(frames)} predictions vs {len(expected)} ground-truth frames")
    try:
        return metric_suite(pred, [gt[k] for k in frames])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _evaluate_pair(pair: tuple[str, str]) -> Metrics2D:
    return evaluate_files(*pair)


def _sequence_name(pred_path: str) -> str:
    p = Path(pred_path)
    return p.parent.name or p.stem


def cmd_eval(args) -> int:
    paths = args.files
    if len(paths) < 2 or len(paths) % 2:
        raise UsageError("eval expects PRED GT [PRED GT ...]")
    pairs = [(paths[i], paths[i + 1]) for i in range(0, len(paths), 2)]
    workers = min(_threads(), len(pairs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            metrics = list(pool.map(_evaluate_pair, pairs))
    else:
        metrics = [_evaluate_pair(p) for p in pairs]
    names = [args.name] if (args.name and len(pairs) == 1) else [_sequence_name(p) for p, _ in pairs]
    report = format_report(list(zip(names, metrics)))
    sys.stdout.write(report)
    last = report.strip().splitlines()[-1].split(",")[1:]
    keys = ("acc2d", "rob2d", "err2d_mean", "err2d_std", "eao")
    print(",".join(f"{k}={v}" for k, v in zip(keys, last)))
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# overlay

def _draw_box(draw: ImageDraw.ImageDraw, b, color) -> None:
    draw.rectangle([b.x, b.y, b.x2 - 1, b.y2 - 1], outline=color, width=2)


def cmd_overlay(args) -> int:
    seq = _open_sequence(args.sequence)
    try:
        preds = {p.frame_index: p for p in read_predictions(args.pred)}
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    gt = read_ground_truth(seq.gt_path) if seq.gt_path.exists() else {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, path in enumerate(seq.frame_paths):
        with Image.open(path) as im:
            canvas = im.convert("RGB")
        draw = ImageDraw.Draw(canvas)
        if k in gt:
            _draw_box(draw, gt[k].bbox, GT_COLOR)
        p = preds.get(k)
        if p is not None:
            if p.bbox is not None:
                _draw_box(draw, p.bbox, PRED_COLOR)
            else:
                draw.rectangle([0, 0, MARKER_SIZE - 1, MARKER_SIZE - 1], fill=MARKER_COLOR)
        canvas.save(out / path.name, format="PNG")
    print(f"wrote {len(seq)} overlay frames to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# selfcheck

def cmd_selfcheck(args) -> int:
    seq = _open_sequence(args.sequence)
    config = _load_config(args)
    if len(seq) < 3:
        raise UsageError("selfcheck needs at least 3 frames")
    if seq.gt_path.exists():
        gt = read_ground_truth(seq.gt_path)
        boxes = {k: g.bbox for k, g in gt.items() if g.visible}
    else:
        b0 = _init_box(args, seq)
        boxes = {0: b0}
        boxes.update({r.frame_index: r.bbox for r in run_tracker(seq, b0, config) if r.bbox is not None})
    starts = [k for k in range(len(seq) - 2) if k in boxes][: args.max_triples]
    if not starts:
        raise UsageError("no frame with a usable box to start a cycle from")
    print("frame,giou_term,l1_term,recon_term")
    rows = []
    for k in starts:
        triple = [seq.frame(k + i) for i in range(3)]
        res = cycle_check(triple, boxes[k], config)
        rows.append((res.giou_term, res.l1_term, res.recon_term))
        print(f"{k},{res.giou_term:.3f},{res.l1_term:.3f},{res.recon_term:.3f}")
    mean = np.mean(rows, axis=0)
    print(f"MEAN,{mean[0]:.3f},{mean[1]:.3f},{mean[2]:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def _add_tracker_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON object with tracker config fields")
    p.add_argument("--mode", choices=["inter_frame_only", "template_only", "full"])
    p.add_argument("--alpha", type=float, help="template/previous-target fusion weight")
    p.add_argument("--beta", type=float, help="occlusion share above which no box is reported")
    p.add_argument("--iters", type=int, help="flow lookup iterations per pyramid level")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adatrack", description="Deformable-region patch tracker.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sequence with ground truth")
    p.add_argument("spec", help="JSON generator spec")
    p.add_argument("out", help="output directory")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("track", help="track a box through a frame directory")
    p.add_argument("sequence", help="directory of %%06d.png frames")
    p.add_argument("--init", help="initial box x,y,w,h (default: ground truth of frame 0)")
    p.add_argument("--out", help="prediction CSV (default: SEQUENCE/boxes_pred.csv)")
    _add_tracker_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("files", nargs="+", metavar="PRED GT", help="one or more prediction/ground-truth CSV pairs")
    p.add_argument("--name", help="sequence name in the report (single pair only)")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlay", help="draw predicted and ground-truth boxes onto the frames")
    p.add_argument("sequence")
    p.add_argument("pred")
    p.add_argument("out")
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("selfcheck", help="forward-backward cycle residuals over a sequence")
    p.add_argument("sequence")
    p.add_argument("--init", help="initial box x,y,w,h when there is no ground truth")
    p.add_argument("--max-triples", type=int, default=10)
    _add_tracker_flags(p)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage already; keep --help at 0
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"adatrack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - anything else is a bug, reported as such
        print(f"adatrack: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
