"""Deformable-region patch tracker driven by dense flow and an adaptive template."""
from .evaluation import GroundTruth, LossReport, Metrics2D, cycle_check, diagnostic_losses, metric_suite
from .features import encode
from .flow import CorrelationFlow, FlowField, compose_flow, estimate_flow, estimate_flow_pair, fb_occlusion
from .geometry import BBox, Point2, expand_box, giou, iou, min_max_enclose
from .matcher import MatchResult, match_anchor
from .synth import SynthFrame, SynthSpec, generate
from .template import TemplateState, warp_template
from .tracker import Mode, TrackerConfig, TrackerState, TrackResult, TrackStatus, init, step, track_sequence

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "Point2",
    "iou",
    "giou",
    "expand_box",
    "min_max_enclose",
    "encode",
    "FlowField",
    "CorrelationFlow",
    "estimate_flow",
    "estimate_flow_pair",
    "compose_flow",
    "fb_occlusion",
    "TemplateState",
    "warp_template",
    "MatchResult",
    "match_anchor",
    "Mode",
    "TrackerConfig",
    "TrackerState",
    "TrackResult",
    "TrackStatus",
    "init",
    "step",
    "track_sequence",
    "SynthSpec",
    "SynthFrame",
    "generate",
    "GroundTruth",
    "Metrics2D",
    "LossReport",
    "metric_suite",
    "cycle_check",
    "diagnostic_losses",
]
