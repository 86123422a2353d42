"""Sperm and impurity detection, tracking and motility analysis in plain numpy."""

from .ccfpn import CCFPN, ccfpn_apply, ccfpn_graph_dump
from .config import RunConfig
from .dbfen import DBFEN, DbfenConfig, dbfen_forward
from .evaluation import ap50_report, average_precision, iou_box
from .head import Detection, decode, diou, diou_nms, kmeans_anchors
from .loss import GroundTruth, assign_targets, detection_loss
from .model import ActiveModel, ModelConfig
from .synth import SynthSpec, synth_generate
from .tracking import Track, build_tracks, error_rates, match_adjacent, motility, motility_report
from .train import PhaseConfig, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ActiveModel", "CCFPN", "DBFEN", "DbfenConfig", "Detection", "GroundTruth", "ModelConfig", "PhaseConfig",
    "RunConfig", "SynthSpec", "Track", "TrainConfig", "ap50_report", "assign_targets", "average_precision",
    "build_tracks", "ccfpn_apply", "ccfpn_graph_dump", "dbfen_forward", "decode", "detection_loss", "diou",
    "diou_nms", "error_rates", "iou_box", "kmeans_anchors", "match_adjacent", "motility", "motility_report",
    "synth_generate", "train",
]
