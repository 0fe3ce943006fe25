"""scikit-learn style wrapper: ``fit`` on scenes, ``predict`` detections, ``score`` mean AP."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import ExperimentConfig
from .evaluation import evaluate
from .scene_synth import Scene
from .training import predict_scenes, train


def check_scenes(X) -> list:
    """Validate a sequence of :class:`Scene` objects (finite ``(N, 4)`` point arrays)."""
    if isinstance(X, Scene):
        X = [X]
    scenes = list(X)
    if not scenes:
        raise ValueError("expected at least one scene")
    for i, s in enumerate(scenes):
        if not isinstance(s, Scene):
            raise TypeError(f"item {i} is {type(s).__name__}, expected Scene")
        pts = np.asarray(s.points)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"scene {i}: points must have shape (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"scene {i}: points contain non-finite values")
    return scenes


class ConQueRDetector(BaseEstimator):
    """Voxel detection transformer, optionally trained with query contrast.

    ``query_contrast=False`` gives the plain set-prediction baseline. Keys not exposed as
    parameters can be set through ``config_overrides`` (dotted keys, as on the CLI).
    """

    def __init__(self, query_contrast=True, n_queries=100, epochs=6, batch_size=1, max_lr=1e-3,
                 tau=0.7, n_groups=3, ema_momentum=0.999, qc_loss_weight=1.0, dn_loss_weight=1.0,
                 inference_mode="threshold", inference_param=0.1, random_state=0, deterministic=False,
                 config_overrides=None):
        self.query_contrast = query_contrast
        self.n_queries = n_queries
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.tau = tau
        self.n_groups = n_groups
        self.ema_momentum = ema_momentum
        self.qc_loss_weight = qc_loss_weight
        self.dn_loss_weight = dn_loss_weight
        self.inference_mode = inference_mode
        self.inference_param = inference_param
        self.random_state = random_state
        self.deterministic = deterministic
        self.config_overrides = config_overrides

    def build_config(self, n_train: int = 1) -> ExperimentConfig:
        qc = bool(self.query_contrast)
        overrides = {
            "seed": int(self.random_state),
            "train.k": self.n_queries,
            "train.epochs": self.epochs,
            "train.batch_size": self.batch_size,
            "train.max_lr": self.max_lr,
            "train.n_train": max(int(n_train), 1),
            "train.deterministic": bool(self.deterministic),
            "contrast.tau": self.tau,
            "contrast.T": self.n_groups if qc else 0,
            "contrast.ema_momentum": self.ema_momentum,
            "contrast.qc_loss_weight": self.qc_loss_weight if qc else 0.0,
            "contrast.dn_loss_weight": self.dn_loss_weight if qc else 0.0,
            "eval.mode": self.inference_mode,
            "eval.param": self.inference_param,
        }
        overrides.update(self.config_overrides or {})
        return ExperimentConfig().with_overrides(overrides)

    def fit(self, X, y=None):
        scenes = check_scenes(X)
        self.config_ = self.build_config(len(scenes))
        state = train(self.config_, scenes)
        self.model_ = state.model
        self.ema_ = state.ema
        self.history_ = state.history
        self.n_steps_ = state.step
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "model_")
        return predict_scenes(self.model_, check_scenes(X), self.config_)

    def score(self, X, y=None) -> float:
        """Mean AP over classes that have ground truth (GTs taken from the scenes)."""
        scenes = check_scenes(X)
        report = evaluate(self.predict(scenes), [s.gts for s in scenes], self.config_.eval.iou_threshold_map)
        value = report.mean_ap
        return 0.0 if math.isnan(value) else value
