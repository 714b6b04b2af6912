"""Masked-autoencoder anomaly segmentation for multi-band field rasters."""

from .anomaly import TrainConfig, TrainState, asl_weight_map, infer, threshold_map, train, weighted_loss
from .errors import ConfigError
from .estimator import AnomalySegmenter
from .masking import MaskPlan, inference_schedule, window_mask
from .metrics import MetricReport, evaluate, iou, miou, pixel_auroc
from .models import ModelConfig, SwinMAE, ViTMAE, build

__version__ = "0.1.0"

__all__ = [
    "AnomalySegmenter",
    "ConfigError",
    "MaskPlan",
    "MetricReport",
    "ModelConfig",
    "SwinMAE",
    "TrainConfig",
    "TrainState",
    "ViTMAE",
    "asl_weight_map",
    "build",
    "evaluate",
    "infer",
    "inference_schedule",
    "iou",
    "miou",
    "pixel_auroc",
    "threshold_map",
    "train",
    "weighted_loss",
    "window_mask",
]
