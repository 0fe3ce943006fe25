"""Set-prediction detection loss: focal classification, smooth-L1 regression and 3D GIoU."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .box_torch import encode_boxes, iou_giou

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
SMOOTH_L1_BETA = 1.0 / 9.0


@dataclass(frozen=True)
class DetLossWeights:
    alpha: float = 1.0  # focal
    beta: float = 4.0  # smooth L1
    gamma: float = 2.0  # GIoU

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


def smooth_l1(diff: torch.Tensor, beta: float = SMOOTH_L1_BETA) -> torch.Tensor:
    adiff = diff.abs()
    return torch.where(adiff < beta, 0.5 * adiff ** 2 / beta, adiff - 0.5 * beta)


def sigmoid_focal_loss(logits: torch.Tensor, targets: torch.Tensor,
                       alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Elementwise focal loss on independent sigmoid outputs (no reduction)."""
    prob = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = prob * targets + (1 - prob) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    return loss


def _as_tensor(x, like, dtype=None):
    return torch.as_tensor(x, dtype=dtype or like.dtype, device=like.device)


def regression_losses(pred_deltas, pred_boxes, ref_boxes, target_boxes):
    """Summed smooth-L1 on the parametrisation and summed ``1 - GIoU`` over matched rows."""
    target = encode_boxes(target_boxes, ref_boxes)
    l1 = smooth_l1(pred_deltas - target).sum()
    _, giou = iou_giou(pred_boxes, target_boxes)
    return l1, (1.0 - giou).sum()


def detection_loss(layer_out, gt_boxes, gt_labels, assignment, weights: DetLossWeights = DetLossWeights(),
                   class_agnostic: bool = False):
    """Weighted focal + smooth-L1 + GIoU loss for one prediction head.

    The focal term runs over every query (unmatched queries target "no object"); the
    regression terms run over matched pairs. All three are divided by the number of
    ground truths (at least 1). Returns ``(total, components)``.
    """
    logits = layer_out.class_logits
    gt_boxes = _as_tensor(gt_boxes, logits)
    gt_labels = _as_tensor(gt_labels, logits, torch.long)
    n_gt = gt_boxes.shape[0]
    norm = float(max(n_gt, 1))
    targets = torch.zeros_like(logits)
    zero = logits.sum() * 0.0
    if assignment.pairs:
        g = torch.as_tensor(assignment.gt_indices, dtype=torch.long)
        q = torch.as_tensor(assignment.query_indices, dtype=torch.long)
        cls = torch.zeros_like(g) if class_agnostic else gt_labels[g]
        targets[q, cls] = 1.0
        l1, giou = regression_losses(layer_out.deltas[q], layer_out.boxes[q], layer_out.refined_from[q],
                                     gt_boxes[g])
    else:
        l1 = giou = zero
    focal = sigmoid_focal_loss(logits, targets).sum() / norm
    l1 = l1 / norm
    giou = giou / norm
    total = weights.alpha * focal + weights.beta * l1 + weights.gamma * giou
    return total, {"focal": focal, "l1": l1, "giou": giou}
