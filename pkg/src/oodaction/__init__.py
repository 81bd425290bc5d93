"""Open-set temporal action detection with dual appearance/motion object
graphs and evidential uncertainty, on a self-contained autodiff engine."""

from .autodiff import Tape, Tensor, backward
from .data import (Annotation, DatasetManifest, ObjectFeatureClip, SynthConfig,
                   generate_synthetic, load_clip, load_manifest, save_clip)
from .detector import Detection, detect, generate_anchors
from .encoder import EncoderParams, encode_objects, temporal_encoding
from .evaluate import build_report, load_ground_truth
from .fusion import FusionParams, dot_product_attention, fuse
from .graph import GraphBranchParams, build_adjacency, gcn_forward
from .losses import (LossWeights, Opinion, affinity_loss, beta_evidence_loss,
                     evidence_to_opinion, final_loss, localization_loss)
from .metrics import (MetricReport, ScoredSample, auroc, aupr, far_at_95,
                      mean_ap, osdr, tiou)
from .model import DetectionModel, actionness_scores
from .training import Adam, GradcheckReport, RunConfig, adam_step, gradcheck, train

__version__ = "0.1.0"

__all__ = [
    "Adam", "Annotation", "DatasetManifest", "Detection", "DetectionModel",
    "EncoderParams", "FusionParams", "GradcheckReport", "GraphBranchParams",
    "LossWeights", "MetricReport", "ObjectFeatureClip", "Opinion", "RunConfig",
    "ScoredSample", "SynthConfig", "Tape", "Tensor", "actionness_scores", "adam_step",
    "affinity_loss", "auroc", "aupr", "backward", "beta_evidence_loss",
    "build_adjacency", "build_report", "detect", "dot_product_attention",
    "encode_objects", "evidence_to_opinion", "far_at_95", "final_loss",
    "fuse", "gcn_forward", "generate_anchors", "generate_synthetic",
    "gradcheck", "load_clip", "load_ground_truth", "load_manifest",
    "localization_loss", "mean_ap", "osdr", "save_clip", "temporal_encoding",
    "tiou", "train",
]
