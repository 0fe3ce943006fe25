"""Experiment runs on disk: data generation, training with checkpoints and logs, evaluation and inference."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig, save_config
from .evaluation import EvalReport, evaluate, write_report
from .inference import write_dump
from .scene_synth import generate_scene, load_scene, save_scene
from .training import TrainState, load_checkpoint, predict_scenes, save_checkpoint, train
from .voxel_backbone import ConfigurationError

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.pt"
METRICS = "metrics.jsonl"
CONFIG = "config.yaml"
DUMP = "predictions.txt"
REPORT = "report.txt"


def scene_path(directory, seed: int) -> Path:
    return Path(directory) / f"scene_{seed:06d}.npz"


def generate_data(config: ExperimentConfig, out_dir, split: str = "train") -> list:
    """Write one ``.npz`` file per scene seed of the requested split; returns the paths."""
    seeds = {"train": config.train_seeds, "eval": config.eval_seeds}[split]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [save_scene(generate_scene(config.scene, s), scene_path(out, s)) for s in seeds]


def load_or_generate(config: ExperimentConfig, seeds, data_dir=None) -> list:
    scenes = []
    for s in seeds:
        path = scene_path(data_dir, s) if data_dir is not None else None
        scenes.append(load_scene(path) if path is not None and path.exists() else generate_scene(config.scene, s))
    return scenes


def read_metrics(path) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def run_train(config: ExperimentConfig, out_dir, data_dir=None) -> TrainState:
    """Train from scratch and write ``checkpoint.pt``, ``metrics.jsonl`` and ``config.yaml`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / CONFIG)
    scenes = load_or_generate(config, config.train_seeds, data_dir)
    state = train(config, scenes, log_path=out / METRICS, diagnostic_path=out / "diagnostic.pt")
    save_checkpoint(state, config, out / CHECKPOINT)
    log.info("trained %d steps, checkpoint at %s", state.step, out / CHECKPOINT)
    return state


@dataclass
class EvalResult:
    report: EvalReport
    detections: list
    seeds: list


def check_disjoint(train_seeds, eval_seeds) -> None:
    overlap = set(train_seeds) & set(eval_seeds)
    if overlap:
        raise ConfigurationError(f"{len(overlap)} eval seeds overlap the training seeds, e.g. {min(overlap)}")


def run_eval(checkpoint, out_dir=None, eval_seeds=None, mode=None, param=None, nms_classes=None,
             data_dir=None) -> EvalResult:
    """Evaluate a checkpoint on held-out scenes; writes ``predictions.txt`` and ``report.txt`` if ``out_dir``."""
    state, config = load_checkpoint(checkpoint)
    if nms_classes is not None:
        config = config.with_overrides({"eval.nms_classes": list(nms_classes)})
    seeds = list(config.eval_seeds if eval_seeds is None else eval_seeds)
    check_disjoint(config.train_seeds, seeds)
    scenes = load_or_generate(config, seeds, data_dir)
    dets = predict_scenes(state.model, scenes, config, mode, param)
    report = evaluate(dets, [s.gts for s in scenes], config.eval.iou_threshold_map)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_dump(out / DUMP, dict(zip(seeds, dets)))
        write_report(out / REPORT, report)
    return EvalResult(report, dets, seeds)


def run_infer(checkpoint, scene_files, out_path, mode=None, param=None) -> dict:
    """Detections for scene files; dump keyed by each scene's stored seed."""
    state, config = load_checkpoint(checkpoint)
    scenes = [load_scene(p) for p in scene_files]
    dets = predict_scenes(state.model, scenes, config, mode, param)
    by_scene = {s.seed: d for s, d in zip(scenes, dets)}
    write_dump(out_path, by_scene)
    return by_scene
