"""Query Contrast: noised GT groups, EMA GT embeddings, projector, multi-positive InfoNCE and denoising."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .box_torch import pairwise_giou
from .geometry import NUM_CLASSES, BoxNoiseSpec, apply_box_noise, boxes_to_arrays
from .losses import DetLossWeights, regression_losses, sigmoid_focal_loss
from .transformer import TAPS, QuerySet, decoder_forward

COS_EPS = 1e-8
SIMILARITIES = ("cos", "giou")
OBJECTIVES = ("infonce", "kd_mse")
PROJECTOR_PLACEMENTS = ("none", "q", "gq")


@dataclass(frozen=True)
class ContrastConfig:
    tau: float = 0.7
    T: int = 3
    include_original_gts: bool = False
    ema_momentum: float = 0.999
    qc_loss_weight: float = 1.0
    dn_loss_weight: float = 1.0
    similarity: str = "cos"
    objective: str = "infonce"
    projector: str = "q"
    tap: str = "ffn_last"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must be in [0, 1]")
        if self.qc_loss_weight < 0 or self.dn_loss_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"similarity must be one of {SIMILARITIES}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.projector not in PROJECTOR_PLACEMENTS:
            raise ValueError(f"projector must be one of {PROJECTOR_PLACEMENTS}")
        if self.tap not in TAPS:
            raise ValueError(f"tap must be one of {TAPS}")

    @property
    def n_groups(self) -> int:
        return self.T + int(self.include_original_gts)

    @property
    def enabled(self) -> bool:
        """Whether GT tokens are decoded at all (the baseline skips them entirely)."""
        return self.n_groups > 0 and (self.qc_loss_weight > 0 or self.dn_loss_weight > 0)


@dataclass
class NoisedGTGroups:
    T: int
    groups: list  # T lists of Box3D, one noised copy per GT
    labels: np.ndarray  # (T * G, C) one-hot noised labels, group-major
    origin_index: np.ndarray  # (T * G,) source GT of each noised box

    @property
    def n_gt(self) -> int:
        return len(self.groups[0]) if self.groups else 0

    def box_array(self) -> np.ndarray:
        flat = [b for g in self.groups for b in g]
        return boxes_to_arrays(flat)[0]


def make_noised_groups(gts, spec: BoxNoiseSpec, T: int, rng: np.random.Generator,
                       include_original: bool = False) -> NoisedGTGroups:
    """``T`` independently noised copies of every GT; ``include_original`` prepends the clean set."""
    if T < 0 or (T == 0 and not include_original):
        raise ValueError("need T >= 1 (or the original group)")
    groups = [list(gts)] if include_original else []
    for _ in range(T):
        groups.append([apply_box_noise(b, spec, rng) for b in gts])
    n_groups = len(groups)
    labels = np.zeros((n_groups * len(gts), NUM_CLASSES))
    flat = [b for g in groups for b in g]
    labels[np.arange(len(flat)), [b.class_id for b in flat]] = 1.0
    origin = np.tile(np.arange(len(gts)), n_groups)
    return NoisedGTGroups(n_groups, groups, labels, origin)


def group_attention_mask(n_queries: int, n_gt: int, n_groups: int) -> torch.Tensor:
    """Block-diagonal mask over ``[queries | group_0 | group_1 | ...]``: no query/GT or cross-group attention."""
    n = n_queries + n_gt * n_groups
    mask = torch.zeros(n, n, dtype=torch.bool)
    mask[:n_queries, :n_queries] = True
    for t in range(n_groups):
        s = n_queries + t * n_gt
        mask[s:s + n_gt, s:s + n_gt] = True
    return mask


@dataclass
class GTQueryEmbeddings:
    gt_embeds: list  # per layer (T, G, D), from the EMA decoder, no grad
    query_embeds: list  # per layer (K, D), live decoder
    projected_queries: list  # per layer (K, D)
    gt_boxes: list = None  # per layer (T, G, 7) EMA-decoded GT boxes
    query_boxes: list = None  # per layer (K, 7)


@dataclass
class DecodedTokens:
    query_layers: list  # DecoderLayerOutput per layer for the K queries
    gt_layers: list  # DecoderLayerOutput per layer for the noised GT tokens (live decoder)


def decode_with_groups(decoder, queries, encoded, groups: NoisedGTGroups = None, tap="ffn_last",
                       batch_index=0) -> DecodedTokens:
    """Live decoder pass over queries plus (optionally) noised GT tokens under a group mask."""
    k = len(queries)
    if groups is None or groups.n_gt == 0:
        mask = torch.ones(k, k, dtype=torch.bool)
        outs = decoder_forward(decoder, queries, encoded, mask, tap=tap, batch_index=batch_index)
        return DecodedTokens(outs, [])
    boxes = torch.as_tensor(groups.box_array(), dtype=queries.boxes.dtype)
    labels = torch.as_tensor(groups.labels, dtype=queries.boxes.dtype)
    mask = group_attention_mask(k, groups.n_gt, groups.T)
    outs = decoder_forward(decoder, queries, encoded, mask, boxes, labels, tap=tap, batch_index=batch_index)
    return DecodedTokens([o.select(slice(0, k)) for o in outs], [o.select(slice(k, None)) for o in outs])


def embed_gt_tokens(ema_decoder, groups: NoisedGTGroups, encoded, tap="ffn_last", batch_index=0):
    """Noised GT tokens through the EMA decoder (groups isolated); per-layer (T, G, D) embeddings and boxes."""
    dtype = encoded.features.dtype
    boxes = torch.as_tensor(groups.box_array(), dtype=dtype)
    labels = torch.as_tensor(groups.labels, dtype=dtype)
    d = encoded.features.shape[1]
    empty = QuerySet(boxes.new_zeros(0, 7), boxes.new_zeros(0, d), boxes.new_zeros(0),
                     torch.zeros(0, dtype=torch.long))
    mask = group_attention_mask(0, groups.n_gt, groups.T)
    with torch.no_grad():
        outs = decoder_forward(ema_decoder, empty, encoded, mask, boxes, labels, tap=tap, batch_index=batch_index)
    shape = (groups.T, groups.n_gt)
    embeds = [o.embeddings.detach().reshape(*shape, -1) for o in outs]
    gt_boxes = [o.boxes.detach().reshape(*shape, 7) for o in outs]
    return embeds, gt_boxes


def project_queries(projector, query_embeds: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(query_embeds).all():
        raise ValueError("query embeddings contain non-finite values")
    return projector(query_embeds)


def embed_gts_and_queries(groups: NoisedGTGroups, queries, encoded, model, ema_decoder,
                          cfg: ContrastConfig = ContrastConfig(), batch_index=0):
    """Live pass (queries + noised GTs, masked) and EMA pass (noised GTs only).

    Returns ``(GTQueryEmbeddings, DecodedTokens)``; the latter carries the live
    predictions needed by the detection and denoising losses.
    """
    decoded = decode_with_groups(model.decoder, queries, encoded, groups, cfg.tap, batch_index)
    gt_embeds, gt_boxes = embed_gt_tokens(ema_decoder, groups, encoded, cfg.tap, batch_index)
    query_embeds = [o.embeddings for o in decoded.query_layers]
    if cfg.projector == "none":
        projected = list(query_embeds)
    else:
        projected = [project_queries(model.projector, q) for q in query_embeds]
    if cfg.projector == "gq":
        gt_embeds = [model.projector(g) for g in gt_embeds]
    embeds = GTQueryEmbeddings(gt_embeds, query_embeds, projected, gt_boxes,
                               [o.boxes for o in decoded.query_layers])
    return embeds, decoded


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between the last dims of ``a (..., D)`` and ``b (K, D)``: ``(..., K)``."""
    na = a.norm(dim=-1, keepdim=True).clamp_min(COS_EPS)
    nb = b.norm(dim=-1, keepdim=True).clamp_min(COS_EPS)
    return (a / na) @ (b / nb).transpose(0, 1)


def contrast_log_probs(similarity: torch.Tensor, tau: float) -> torch.Tensor:
    """Log-softmax over queries of ``similarity / tau``."""
    return F.log_softmax(similarity / tau, dim=-1)


def info_nce(similarity: torch.Tensor, positive_query: torch.Tensor, tau: float) -> torch.Tensor:
    """Multi-positive InfoNCE.

    ``similarity`` is ``(T, G, K)``: similarity of noised copy t of GT i with query k.
    ``positive_query[i]`` is the query matched to GT i. Returns the per-GT loss summed
    over copies, averaged over GTs.
    """
    log_p = contrast_log_probs(similarity, tau)  # (T, G, K)
    g = torch.arange(similarity.shape[1])
    return -log_p[:, g, positive_query].sum(0).mean()


def query_contrast_loss(gt_embeds: torch.Tensor, projected_queries: torch.Tensor, assignment,
                        cfg: ContrastConfig = ContrastConfig(), gt_boxes=None, query_boxes=None) -> torch.Tensor:
    """Contrast loss of one decoder layer.

    ``gt_embeds`` is ``(T, G, D)`` and carries no gradient; ``projected_queries`` is
    ``(K, D)``. The GIoU variant uses BEV GIoU between ``gt_boxes (T, G, 7)`` and
    ``query_boxes (K, 7)`` as the similarity; the KD-MSE variant regresses the matched
    projected query onto its GT embeddings with no negatives.
    """
    gt_embeds = gt_embeds.detach()
    if not assignment.pairs or gt_embeds.shape[1] == 0:
        return projected_queries.sum() * 0.0
    g = torch.as_tensor(assignment.gt_indices, dtype=torch.long)
    q = torch.as_tensor(assignment.query_indices, dtype=torch.long)
    if cfg.objective == "kd_mse":
        diff = projected_queries[q][None, :, :] - gt_embeds[:, g, :]
        return (diff ** 2).mean(-1).sum(0).mean()
    if cfg.similarity == "giou":
        T, G = gt_boxes.shape[:2]
        sim = pairwise_giou(gt_boxes.detach().reshape(T * G, 7), query_boxes, bev=True).reshape(T, G, -1)
    else:
        sim = cosine_matrix(gt_embeds, projected_queries)
    sim = sim[:, g, :]
    return info_nce(sim, q, cfg.tau)


def denoising_loss(gt_layer_out, original_boxes, original_labels, origin_index,
                   weights: DetLossWeights = DetLossWeights()) -> torch.Tensor:
    """Detection-style loss of every noised token against its source GT, averaged over tokens."""
    logits = gt_layer_out.class_logits
    n_tokens = logits.shape[0]
    if n_tokens == 0:
        return logits.sum() * 0.0
    origin = torch.as_tensor(origin_index, dtype=torch.long)
    boxes = torch.as_tensor(original_boxes, dtype=logits.dtype)[origin]
    labels = torch.as_tensor(original_labels, dtype=torch.long)[origin]
    targets = F.one_hot(labels, logits.shape[1]).to(logits.dtype)
    focal = sigmoid_focal_loss(logits, targets).sum()
    l1, giou = regression_losses(gt_layer_out.deltas, gt_layer_out.boxes, gt_layer_out.refined_from, boxes)
    return (weights.alpha * focal + weights.beta * l1 + weights.gamma * giou) / n_tokens


def make_ema(module: torch.nn.Module) -> torch.nn.Module:
    """Frozen copy of ``module`` to be tracked with :func:`ema_update`."""
    ema = copy.deepcopy(module)
    for p in ema.parameters():
        p.requires_grad_(False)
    return ema


@torch.no_grad()
def ema_update(live: torch.nn.Module, ema: torch.nn.Module, momentum: float) -> torch.nn.Module:
    """``ema <- momentum * ema + (1 - momentum) * live`` for every parameter."""
    if momentum == 0.0:
        for p_live, p_ema in zip(live.parameters(), ema.parameters()):
            p_ema.copy_(p_live)
        return ema
    if momentum == 1.0:
        return ema
    for p_live, p_ema in zip(live.parameters(), ema.parameters()):
        if p_live.shape != p_ema.shape:
            raise ValueError("live and EMA parameter shapes differ")
        p_ema.mul_(momentum).add_(p_live.detach(), alpha=1.0 - momentum)
    return ema
