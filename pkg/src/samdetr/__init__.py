"""Toy DETR-style detector with a semantics aligner, built on a small numpy autodiff engine."""

from .config import RunConfig, load_config
from .data import SceneSample, generate_scene
from .estimator import SAMDETRDetector
from .metrics import Detections, evaluate_ap50
from .model import ModelConfig, SAMDETRModel

__all__ = [
    "Detections",
    "ModelConfig",
    "RunConfig",
    "SAMDETRDetector",
    "SAMDETRModel",
    "SceneSample",
    "evaluate_ap50",
    "generate_scene",
    "load_config",
]
__version__ = "0.1.0"
