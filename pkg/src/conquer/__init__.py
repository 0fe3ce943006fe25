"""Voxel detection transformer with query contrast, on synthetic point-cloud scenes."""
from .config import ExperimentConfig, load_config, preset
from .estimator import ConQueRDetector
from .evaluation import EvalReport, evaluate
from .geometry import Box3D, BoxNoiseSpec, giou3d, iou3d
from .inference import Detection, finalize_predictions, nms
from .matching import brute_force_match, hungarian_match
from .query_contrast import ContrastConfig, query_contrast_loss
from .scene_synth import Scene, SceneConfig, generate_scene

__all__ = [
    "Box3D", "BoxNoiseSpec", "ConQueRDetector", "ContrastConfig", "Detection", "EvalReport", "ExperimentConfig",
    "Scene", "SceneConfig", "brute_force_match", "evaluate", "finalize_predictions", "generate_scene", "giou3d",
    "hungarian_match", "iou3d", "load_config", "nms", "preset", "query_contrast_loss",
]
