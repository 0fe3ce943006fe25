"""Experiment configuration: nested dataclasses, YAML round-trip, dotted overrides and a stable hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field

import yaml

from .geometry import NUM_CLASSES, BoxNoiseSpec
from .losses import DetLossWeights
from .query_contrast import ContrastConfig
from .scene_synth import SceneConfig
from .transformer import ModelConfig
from .voxel_backbone import ConfigurationError, VoxelGridConfig


@dataclass(frozen=True)
class TrainConfig:
    k: int = 100  # object queries
    epochs: int = 6
    batch_size: int = 1  # per-scene steps; larger batches train far worse in 6 toy epochs
    max_lr: float = 1e-3
    weight_decay: float = 0.01
    pct_start: float = 0.4
    div_factor: float = 10.0
    final_div_factor: float = 100.0
    grad_clip: float = 10.0
    n_train: int = 400
    train_seed_start: int = 0
    paste_per_scene: int = 2
    fade_augment: bool = True
    deterministic: bool = False  # float64 weights and deterministic kernels
    log_every: int = 1

    def __post_init__(self):
        if self.k < 1 or self.epochs < 0 or self.batch_size < 1 or self.n_train < 1:
            raise ConfigurationError("k, batch_size, n_train must be >= 1 and epochs >= 0")
        if self.max_lr <= 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigurationError("max_lr and grad_clip must be positive, weight_decay >= 0")
        if not 0.0 < self.pct_start < 1.0:
            raise ConfigurationError("pct_start must be in (0, 1)")
        if self.paste_per_scene < 0 or self.log_every < 1:
            raise ConfigurationError("paste_per_scene must be >= 0 and log_every >= 1")


@dataclass(frozen=True)
class EvalConfig:
    n_eval: int = 100
    eval_seed_start: int = 100_000
    mode: str = "threshold"
    param: float = 0.1
    nms_classes: tuple = ()  # class ids that go through NMS after finalization
    nms_score: float = 0.1
    nms_iou: float = 0.7
    iou_thresholds: tuple = (0.7, 0.5, 0.5)

    def __post_init__(self):
        if self.mode not in ("topN", "threshold"):
            raise ConfigurationError(f"unknown inference mode {self.mode!r}")
        if self.n_eval < 1:
            raise ConfigurationError("n_eval must be >= 1")
        if len(self.iou_thresholds) != NUM_CLASSES:
            raise ConfigurationError("need one IoU threshold per class")
        if any(not 0 <= c < NUM_CLASSES for c in self.nms_classes):
            raise ConfigurationError(f"nms_classes out of range: {self.nms_classes}")

    @property
    def iou_threshold_map(self) -> dict:
        return dict(enumerate(self.iou_thresholds))


SECTIONS = {
    "scene": SceneConfig,
    "voxel": VoxelGridConfig,
    "model": ModelConfig,
    "loss": DetLossWeights,
    "noise": BoxNoiseSpec,
    "contrast": ContrastConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    voxel: VoxelGridConfig = field(default_factory=VoxelGridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: DetLossWeights = field(default_factory=DetLossWeights)
    noise: BoxNoiseSpec = field(default_factory=BoxNoiseSpec)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def __post_init__(self):
        if tuple(self.scene.range) != tuple(self.voxel.range):
            raise ConfigurationError("scene and voxel ranges must agree")
        self.voxel.check_bev_divisible()
        n_cells = self.voxel.bev_shape[0] * self.voxel.bev_shape[1]
        if self.train.k > n_cells:
            raise ConfigurationError(f"k={self.train.k} exceeds the {n_cells} BEV cells")
        max_gts = sum(hi for _, hi in self.scene.objects_per_class) + self.train.paste_per_scene
        if self.train.k < max_gts:
            raise ConfigurationError(f"k={self.train.k} is below the {max_gts} objects a training scene can hold")
        train_seeds = range(self.train.train_seed_start, self.train.train_seed_start + self.train.n_train)
        eval_seeds = range(self.eval.eval_seed_start, self.eval.eval_seed_start + self.eval.n_eval)
        if max(train_seeds.start, eval_seeds.start) < min(train_seeds.stop, eval_seeds.stop):
            raise ConfigurationError("train and eval scene seed ranges overlap")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data or {})
        unknown = set(data) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, kind in SECTIONS.items():
            section = data.get(name) or {}
            names = {f.name for f in dataclasses.fields(kind)}
            bad = set(section) - names
            if bad:
                raise ConfigurationError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = kind(**{k: _tuples(v) for k, v in section.items()})
        if "seed" in data:
            kwargs["seed"] = int(data["seed"])
        return cls(**kwargs)

    def with_overrides(self, overrides) -> "ExperimentConfig":
        """Apply ``"section.key=value"`` strings (or a ``{dotted: value}`` mapping)."""
        data = self.to_dict()
        items = overrides.items() if isinstance(overrides, dict) else (_split(o) for o in overrides)
        for key, value in items:
            parts = key.split(".")
            node = data
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigurationError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigurationError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def train_seeds(self) -> list:
        return list(range(self.train.train_seed_start, self.train.train_seed_start + self.train.n_train))

    @property
    def eval_seeds(self) -> list:
        return list(range(self.eval.eval_seed_start, self.eval.eval_seed_start + self.eval.n_eval))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


# YAML 1.1 reads "1e-3" (no dot) as a string
_SCIENTIFIC = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)[eE][+-]?\d+$")


def _tuples(x):
    if isinstance(x, list):
        return tuple(_tuples(v) for v in x)
    if isinstance(x, str) and _SCIENTIFIC.match(x.strip()):
        return float(x)
    return x


def _split(item: str):
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"override must look like section.key=value, got {item!r}")
    return key.strip(), yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    data = {}
    if path is not None:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    return ExperimentConfig.from_dict(data).with_overrides(list(overrides))


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)


# ablation presets, as dotted overrides on top of the defaults
PRESETS = {
    "conquer": {},
    "baseline": {"contrast.T": 0, "contrast.qc_loss_weight": 0.0, "contrast.dn_loss_weight": 0.0},
    "aux_dn_only": {"contrast.qc_loss_weight": 0.0},
    "single_positive": {"contrast.T": 1},
    "qc_giou": {"contrast.similarity": "giou"},
    "kd_mse": {"contrast.objective": "kd_mse"},
    "projector_none": {"contrast.projector": "none"},
    "projector_gq": {"contrast.projector": "gq"},
    "tap_decoder": {"contrast.tap": "decoder"},
    "tap_ffn_second_last": {"contrast.tap": "ffn_second_last"},
    "with_original_gts": {"contrast.include_original_gts": True},
}


def preset(name: str, base: ExperimentConfig = None) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return (base or ExperimentConfig()).with_overrides(PRESETS[name])
