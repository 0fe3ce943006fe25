"""Turning decoder outputs into final detections: top-N or score-threshold selection and class-wise NMS."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import NUM_CLASSES, Box3D, iou3d

MODES = ("topN", "threshold")
DUMP_HEADER = "# scene_id class_id score cx cy cz l w h heading"


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    class_id: int
    query_index: int = -1

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if not 0 <= self.class_id < NUM_CLASSES:
            raise ValueError(f"class_id {self.class_id} out of range")


def _score_order(scores: np.ndarray) -> np.ndarray:
    # descending score, ascending index on ties
    return np.lexsort((np.arange(len(scores)), -scores))


def finalize_predictions(last_layer, mode: str = "threshold", param: float = 0.1) -> list:
    """Detections from the last decoder layer, sorted by descending score (ties by query index).

    ``mode="topN"`` keeps the ``int(param)`` best queries; ``mode="threshold"`` keeps every
    query whose score is at least ``param``. A query's score is its highest per-class
    sigmoid and its class the corresponding argmax.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    with torch.no_grad():
        probs = torch.sigmoid(last_layer.class_logits.detach()).double().cpu().numpy()
        boxes = last_layer.boxes.detach().double().cpu().numpy()
    if len(probs) == 0:
        return []
    cls = probs.argmax(axis=1)
    scores = probs[np.arange(len(probs)), cls]
    order = _score_order(scores)
    if mode == "topN":
        n = int(param)
        if n < 0:
            raise ValueError("N must be non-negative")
        order = order[:n]
    else:
        order = order[scores[order] >= param]
    out = []
    for q in order:
        c = int(cls[q])
        box = Box3D(*boxes[q].tolist(), class_id=c)
        out.append(Detection(box, float(scores[q]), c, int(q)))
    return out


def nms(dets, score_thr: float = 0.1, iou_thr: float = 0.7, classes=None) -> list:
    """Class-wise greedy NMS on 3D IoU after dropping detections scored below ``score_thr``.

    A detection is suppressed when its IoU with an already kept detection of the same
    class exceeds ``iou_thr``. ``classes`` restricts suppression to those class ids;
    detections of other classes only go through the score filter. Output keeps the
    descending-score order of the input (stable).
    """
    if not (0.0 <= score_thr <= 1.0 and 0.0 <= iou_thr <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    dets = list(dets)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = _score_order(scores) if dets else []
    kept_by_class = {}
    out = []
    for i in order:
        d = dets[i]
        if d.score < score_thr:
            continue
        if classes is None or d.class_id in classes:
            kept = kept_by_class.setdefault(d.class_id, [])
            if any(iou3d(k.box, d.box) > iou_thr for k in kept):
                continue
            kept.append(d)
        out.append(d)
    return out


def write_dump(path, dets_by_scene: dict) -> None:
    """Line-delimited text dump: one whitespace-separated detection per line, scenes in key order."""
    lines = [DUMP_HEADER]
    for scene_id in sorted(dets_by_scene):
        for d in dets_by_scene[scene_id]:
            b = d.box
            vals = [b.cx, b.cy, b.cz, b.l, b.w, b.h, b.heading]
            lines.append(" ".join([str(scene_id), str(d.class_id), repr(float(d.score))] + [repr(float(v)) for v in vals]))
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_dump(path, scene_ids=None) -> dict:
    """Inverse of :func:`write_dump`; ``scene_ids`` adds empty entries for scenes without detections."""
    out = {int(s): [] for s in (scene_ids or [])}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 10:
                raise ValueError(f"{path}:{lineno}: expected 10 fields, got {len(parts)}")
            scene_id, class_id = int(parts[0]), int(parts[1])
            score = float(parts[2])
            box = Box3D(*map(float, parts[3:]), class_id=class_id)
            out.setdefault(scene_id, []).append(Detection(box, score, class_id))
    return out
