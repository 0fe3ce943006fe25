"""Average precision, heading-weighted AP and sparsity statistics over a set of scenes."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import CLASS_NAMES, NUM_CLASSES, iou3d

DEFAULT_IOU_THRESHOLDS = {0: 0.7, 1: 0.5, 2: 0.5}
RECALL_GRID = np.arange(101) / 100.0
DIFFICULTY = "single"


def heading_weight(pred_heading: float, gt_heading: float) -> float:
    """Heading accuracy ``max(0, 1 - |wrapped difference| / pi)`` as in the public Waymo APH metric."""
    d = math.remainder(pred_heading - gt_heading, 2.0 * math.pi)
    return max(0.0, 1.0 - abs(d) / math.pi)


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Mean over a 101-point recall grid of the best precision at recall >= r (0 if unreachable)."""
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    if len(recall) == 0:
        return 0.0
    # running max from the right makes precision monotone non-increasing in rank
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    vals = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(vals.mean())


def match_scene(dets, gts, iou_thresholds) -> tuple:
    """Greedy score-ordered matching inside one scene.

    Returns per-detection ``(is_tp, heading_weight)`` lists in input order. Each detection
    takes the unmatched same-class GT of highest IoU (lowest index on ties) if that IoU
    reaches the class threshold.
    """
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = np.lexsort((np.arange(len(dets)), -scores)) if len(dets) else []
    tp = [False] * len(dets)
    weight = [0.0] * len(dets)
    taken = [False] * len(gts)
    for i in order:
        d = dets[i]
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if taken[j] or g.class_id != d.class_id:
                continue
            v = iou3d(d.box, g)
            if v > best_iou:
                best, best_iou = j, v
        if best >= 0 and best_iou >= iou_thresholds[d.class_id]:
            taken[best] = True
            tp[i] = True
            weight[i] = heading_weight(d.box.heading, gts[best].heading)
    return tp, weight


@dataclass
class PRCurve:
    scores: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    precision_h: np.ndarray


@dataclass
class EvalReport:
    ap: dict  # class id -> AP (nan when the class has no GT)
    aph: dict
    recall: dict  # class id -> recall over all detections
    n_gt: dict
    n_scenes: int
    predictions_per_scene: float
    predictions_per_scene_by_class: dict
    false_positives_per_scene: float
    iou_thresholds: dict = field(default_factory=lambda: dict(DEFAULT_IOU_THRESHOLDS))
    curves: dict = field(default_factory=dict, repr=False)

    @staticmethod
    def _mean(values):
        vals = [v for v in values if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_ap(self) -> float:
        return self._mean(self.ap.values())

    @property
    def mean_aph(self) -> float:
        return self._mean(self.aph.values())

    def to_flat(self) -> dict:
        flat = {
            "difficulty": DIFFICULTY,
            "n_scenes": self.n_scenes,
            "mean_ap": self.mean_ap,
            "mean_aph": self.mean_aph,
            "predictions_per_scene": self.predictions_per_scene,
            "false_positives_per_scene": self.false_positives_per_scene,
        }
        for c in sorted(self.ap):
            name = CLASS_NAMES[c]
            flat[f"ap.{name}"] = self.ap[c]
            flat[f"aph.{name}"] = self.aph[c]
            flat[f"recall.{name}"] = self.recall[c]
            flat[f"n_gt.{name}"] = self.n_gt[c]
            flat[f"iou_threshold.{name}"] = self.iou_thresholds[c]
            flat[f"predictions_per_scene.{name}"] = self.predictions_per_scene_by_class[c]
        return flat


def _class_curve(entries, n_gt):
    """PR points at every distinct score; entries are ``(score, is_tp, weight)``."""
    if not entries:
        empty = np.zeros(0)
        return PRCurve(empty, empty, empty, empty)
    scores = np.array([e[0] for e in entries])
    tp = np.array([e[1] for e in entries], dtype=np.float64)
    w = np.array([e[2] for e in entries])
    order = np.argsort(-scores, kind="stable")
    scores, tp, w = scores[order], tp[order], w[order]
    ctp, cw = np.cumsum(tp), np.cumsum(w)
    n = np.arange(1, len(scores) + 1)
    # tied scores form one operating point, so the curve is independent of tie order
    last = np.r_[scores[1:] != scores[:-1], True]
    recall = ctp[last] / n_gt
    return PRCurve(scores[last], recall, ctp[last] / n[last], cw[last] / n[last])


def evaluate(dets_per_scene, gts_per_scene, iou_thresholds=None) -> EvalReport:
    """Evaluate detections against GTs, scene by scene (both sequences aligned).

    AP is the 101-point interpolated area under the PR curve. APH uses the same curve
    with each true positive's contribution to precision scaled by its heading weight;
    recall counts true positives unweighted. Classes without any GT get AP = nan and
    are left out of the means.
    """
    thresholds = dict(DEFAULT_IOU_THRESHOLDS if iou_thresholds is None else iou_thresholds)
    for c, t in thresholds.items():
        if not 0 <= int(c) < NUM_CLASSES or not 0.0 < t <= 1.0:
            raise ValueError(f"invalid IoU threshold entry {c}: {t}")
    dets_per_scene, gts_per_scene = list(dets_per_scene), list(gts_per_scene)
    if len(dets_per_scene) != len(gts_per_scene):
        raise ValueError("detections and GTs must cover the same scenes")
    classes = sorted(thresholds)
    entries = {c: [] for c in classes}
    n_gt = {c: 0 for c in classes}
    n_pred = {c: 0 for c in classes}
    n_fp = 0
    for dets, gts in zip(dets_per_scene, gts_per_scene):
        for obj in list(dets) + list(gts):
            if obj.class_id not in thresholds:
                raise ValueError(f"class id {obj.class_id} is not configured for evaluation")
        tp, weight = match_scene(dets, gts, thresholds)
        for d, t, w in zip(dets, tp, weight):
            entries[d.class_id].append((d.score, t, w))
            n_pred[d.class_id] += 1
            n_fp += not t
        for g in gts:
            n_gt[g.class_id] += 1
    n_scenes = len(dets_per_scene)
    ap, aph, recall, curves = {}, {}, {}, {}
    for c in classes:
        curve = _class_curve(entries[c], max(n_gt[c], 1))
        curves[c] = curve
        if n_gt[c] == 0:
            ap[c] = aph[c] = recall[c] = float("nan")
            continue
        ap[c] = interpolated_ap(curve.recall, curve.precision)
        aph[c] = interpolated_ap(curve.recall, curve.precision_h)
        recall[c] = float(curve.recall[-1]) if len(curve.recall) else 0.0
    denom = max(n_scenes, 1)
    return EvalReport(
        ap=ap, aph=aph, recall=recall, n_gt=n_gt, n_scenes=n_scenes,
        predictions_per_scene=sum(n_pred.values()) / denom,
        predictions_per_scene_by_class={c: n_pred[c] / denom for c in classes},
        false_positives_per_scene=n_fp / denom,
        iou_thresholds=thresholds,
        curves=curves,
    )


def write_report(path, report) -> None:
    """Flat ``key=value`` text file, one entry per line in sorted key order."""
    flat = report.to_flat() if isinstance(report, EvalReport) else dict(report)
    lines = [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in sorted(flat.items())]
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_report(path) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            try:
                out[key] = int(value)
            except ValueError:
                try:
                    out[key] = float(value)
                except ValueError:
                    out[key] = value
    return out
