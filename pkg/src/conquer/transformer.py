"""Encoder/decoder transformer over BEV features with in-box attention and iterative refinement."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .box_torch import DELTA_DIM, decode_boxes
from .geometry import NUM_CLASSES
from .voxel_backbone import BEVFeatureMap

# fractions of the box extent at which the 3x3 sample grid sits
SAMPLE_GRID = (-1.0 / 3.0, 0.0, 1.0 / 3.0)
N_SAMPLES = len(SAMPLE_GRID) ** 2
DESCRIPTOR_DIM = 8 + NUM_CLASSES
TAPS = ("decoder", "ffn_second_last", "ffn_last")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    enc_layers: int = 3
    dec_layers: int = 3
    backbone_widths: tuple = (32, 64, 64)
    encoder_window: float = 3.0  # cells
    encoder_max_offset: float = 1.0  # cells
    encoder_max_log_scale: float = math.log(1.5)
    anchor_size: tuple = (2.0, 1.0, 1.6)
    anchor_z: float = 0.8
    prior_prob: float = 0.01

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.enc_layers < 0 or self.dec_layers < 1:
            raise ValueError("need enc_layers >= 0 and dec_layers >= 1")


class MLP(nn.Module):
    def __init__(self, dims):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def sine_position_encoding(xy_normalized: torch.Tensor, d_model: int, max_cycles: float = 8.0) -> torch.Tensor:
    """Fixed sinusoidal encoding of coordinates in ``[0, 1]^2``, shape ``(..., d_model)``.

    Frequencies are geometric from ``max_cycles`` cycles per unit down to 1e-4 of that.
    """
    n_freq = d_model // 4
    dim_t = 10000.0 ** (torch.arange(n_freq, dtype=xy_normalized.dtype) / n_freq)
    scaled = xy_normalized[..., None] * (2.0 * math.pi * max_cycles) / dim_t
    enc = torch.cat([scaled.sin(), scaled.cos()], dim=-1)  # (..., 2, 2 * n_freq)
    enc = enc.flatten(-2)
    if enc.shape[-1] < d_model:
        enc = F.pad(enc, (0, d_model - enc.shape[-1]))
    return enc


def _normalized_grid(points_xy, bev: BEVFeatureMap):
    x0, y0 = bev.origin
    gx = 2.0 * (points_xy[..., 0] - x0) / (bev.width * bev.cell_size[0]) - 1.0
    gy = 2.0 * (points_xy[..., 1] - y0) / (bev.height * bev.cell_size[1]) - 1.0
    return torch.stack([gx, gy], dim=-1)


def box_sample_points(boxes_bev: torch.Tensor) -> torch.Tensor:
    """3x3 grid of points inside rotated BEV boxes ``(..., 5)`` = (cx, cy, l, w, heading)."""
    grid = boxes_bev.new_tensor(SAMPLE_GRID)
    u = (grid[:, None] * boxes_bev[..., 2, None, None]).expand(*boxes_bev.shape[:-1], 3, 3)
    v = (grid[None, :] * boxes_bev[..., 3, None, None]).expand(*boxes_bev.shape[:-1], 3, 3)
    u = u.reshape(*boxes_bev.shape[:-1], N_SAMPLES)
    v = v.reshape(*boxes_bev.shape[:-1], N_SAMPLES)
    c = torch.cos(boxes_bev[..., 4])[..., None]
    s = torch.sin(boxes_bev[..., 4])[..., None]
    x = boxes_bev[..., 0, None] + u * c - v * s
    y = boxes_bev[..., 1, None] + u * s + v * c
    return torch.stack([x, y], dim=-1)


class InBoxAttention(nn.Module):
    """Multi-head attention over bilinear samples on a 3x3 grid inside each token's box."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.value = nn.Linear(d_model, d_model)
        self.weights = nn.Linear(d_model, n_heads * N_SAMPLES)
        self.out = nn.Linear(d_model, d_model)
        nn.init.zeros_(self.weights.weight)
        nn.init.zeros_(self.weights.bias)

    def forward(self, query: torch.Tensor, boxes_bev: torch.Tensor, bev: BEVFeatureMap) -> torch.Tensor:
        # query (B, N, D); boxes_bev (B, N, 5) in meters; bev.features (B, D, H, W)
        B, N, D = query.shape
        h, dh = self.n_heads, D // self.n_heads
        value = self.value(bev.features.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        value = value.reshape(B * h, dh, bev.height, bev.width)
        grid = _normalized_grid(box_sample_points(boxes_bev), bev)  # (B, N, 9, 2)
        grid = grid.unsqueeze(1).expand(B, h, N, N_SAMPLES, 2).reshape(B * h, N, N_SAMPLES, 2)
        sampled = F.grid_sample(value, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
        sampled = sampled.reshape(B, h, dh, N, N_SAMPLES)
        attn = self.weights(query).reshape(B, N, h, N_SAMPLES).softmax(-1)
        out = torch.einsum("bnhp,bhdnp->bnhd", attn, sampled).reshape(B, N, D)
        return self.out(out)


class MaskedSelfAttention(nn.Module):
    """Multi-head self-attention where ``mask[i, j]`` allows token i to attend to token j."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        N, D = x.shape
        h, dh = self.n_heads, D // self.n_heads
        q, k, v = self.qkv(x).reshape(N, 3, h, dh).permute(1, 2, 0, 3)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~mask, float("-inf"))
        out = scores.softmax(-1) @ v
        return self.out(out.transpose(0, 1).reshape(N, D))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.attn = InBoxAttention(d, cfg.n_heads)
        self.box_offset = nn.Linear(d, 2)
        self.box_scale = nn.Linear(d, 2)
        for layer in (self.box_offset, self.box_scale):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)
        self.norm1 = nn.LayerNorm(d)
        self.ffn = MLP([d, cfg.ffn_dim, d])
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x, pos, centers, bev: BEVFeatureMap):
        # x (B, HW, D); pos (HW, D); centers (HW, 2)
        cfg = self.cfg
        q = x + pos
        cell = x.new_tensor(bev.cell_size)
        center = centers + torch.tanh(self.box_offset(q)) * cfg.encoder_max_offset * cell
        size = cfg.encoder_window * cell * torch.exp(torch.tanh(self.box_scale(q)) * cfg.encoder_max_log_scale)
        boxes = torch.cat([center, size, torch.zeros_like(size[..., :1])], dim=-1)
        value_map = bev.with_features(x.transpose(1, 2).reshape(x.shape[0], -1, bev.height, bev.width))
        x = self.norm1(x + self.attn(q, boxes, value_map))
        return self.norm2(x + self.ffn(x))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.d_model = cfg.d_model

    def forward(self, bev: BEVFeatureMap) -> BEVFeatureMap:
        B, D, H, W = bev.features.shape
        centers = bev.cell_centers()
        extent = centers.new_tensor([W * bev.cell_size[0], H * bev.cell_size[1]])
        pos = sine_position_encoding((centers - centers.new_tensor(bev.origin)) / extent, D)
        x = bev.features.flatten(2).transpose(1, 2)
        for layer in self.layers:
            x = layer(x, pos, centers, bev)
        return bev.with_features(x.transpose(1, 2).reshape(B, D, H, W))


def encoder_forward(bev: BEVFeatureMap, encoder: Encoder) -> BEVFeatureMap:
    if not torch.isfinite(bev.features).all():
        raise ValueError("encoder input contains non-finite values")
    return encoder(bev)


class PredictionHead(nn.Module):
    """Three-layer FFN whose last layer (width D) feeds linear class and box readouts."""

    def __init__(self, d_model: int, n_classes: int, prior_prob: float = 0.01):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_model)
        self.fc2 = nn.Linear(d_model, d_model)
        self.fc3 = nn.Linear(d_model, d_model)
        self.cls = nn.Linear(d_model, n_classes)
        self.box = nn.Linear(d_model, DELTA_DIM)
        nn.init.constant_(self.cls.bias, -math.log((1.0 - prior_prob) / prior_prob))
        self.reset_box_identity()

    def reset_box_identity(self):
        """Zero box readout: every prediction reproduces its reference box."""
        nn.init.zeros_(self.box.weight)
        with torch.no_grad():
            self.box.bias.zero_()
            self.box.bias[7] = 1.0

    def forward(self, x):
        h1 = F.relu(self.fc1(x))
        h2 = F.relu(self.fc2(h1))
        last = self.fc3(h2)
        return self.cls(last), self.box(last), {"ffn_second_last": h2, "ffn_last": last}


@dataclass
class QuerySet:
    boxes: torch.Tensor  # (K, 7), detached proposal boxes
    features: torch.Tensor  # (K, D), zeros
    scores: torch.Tensor  # (K,), class-agnostic objectness in [0, 1]
    cell_index: torch.Tensor  # (K,) flat BEV cell of each proposal

    def __len__(self):
        return self.boxes.shape[0]


@dataclass
class Proposals:
    logits: torch.Tensor  # (B, HW) objectness logits
    deltas: torch.Tensor  # (B, HW, 8)
    anchors: torch.Tensor  # (HW, 7)
    boxes: torch.Tensor  # (B, HW, 7)


class ProposalHead(nn.Module):
    """Class-agnostic per-cell objectness and box regression against a fixed cell anchor."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.head = PredictionHead(cfg.d_model, 1, cfg.prior_prob)

    def anchors(self, bev: BEVFeatureMap) -> torch.Tensor:
        centers = bev.cell_centers()
        n = centers.shape[0]
        rest = centers.new_tensor([self.cfg.anchor_z, *self.cfg.anchor_size, 0.0]).expand(n, 5)
        return torch.cat([centers, rest], dim=-1)

    def forward(self, encoded: BEVFeatureMap) -> Proposals:
        x = encoded.features.flatten(2).transpose(1, 2)
        logits, deltas, _ = self.head(x)
        anchors = self.anchors(encoded).to(x.dtype)
        return Proposals(logits[..., 0], deltas, anchors, decode_boxes(deltas, anchors))


def propose_queries(proposals: Proposals, k: int, batch_index: int = 0, d_model: int = 64) -> QuerySet:
    """Top-``k`` cells by objectness, ties broken by ascending cell index."""
    logits = proposals.logits[batch_index]
    if k > logits.shape[0]:
        raise ValueError(f"k={k} exceeds the number of BEV cells ({logits.shape[0]})")
    order = torch.sort(logits.detach(), descending=True, stable=True).indices[:k]
    boxes = proposals.boxes[batch_index, order].detach()
    return QuerySet(
        boxes=boxes,
        features=boxes.new_zeros(k, d_model),
        scores=torch.sigmoid(logits.detach()[order]),
        cell_index=order,
    )


@dataclass
class DecoderLayerOutput:
    layer_index: int
    boxes: torch.Tensor  # (N, 7) decoded predictions
    class_logits: torch.Tensor  # (N, C)
    deltas: torch.Tensor  # (N, 8) regression against refined_from
    refined_from: torch.Tensor  # (N, 7) reference boxes (detached)
    taps: dict = field(default_factory=dict)  # name -> (N, D)
    tap: str = "ffn_last"

    @property
    def embeddings(self) -> torch.Tensor:
        return self.taps[self.tap]

    def select(self, index) -> "DecoderLayerOutput":
        return DecoderLayerOutput(
            self.layer_index, self.boxes[index], self.class_logits[index], self.deltas[index],
            self.refined_from[index], {k: v[index] for k, v in self.taps.items()}, self.tap,
        )


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.box_embed = MLP([DESCRIPTOR_DIM, d, d, d])
        self.self_attn = MaskedSelfAttention(d, cfg.n_heads)
        self.norm1 = nn.LayerNorm(d)
        self.cross_attn = InBoxAttention(d, cfg.n_heads)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = MLP([d, cfg.ffn_dim, d])
        self.norm3 = nn.LayerNorm(d)
        self.head = PredictionHead(d, NUM_CLASSES, cfg.prior_prob)

    def forward(self, features, descriptor, boxes, bev: BEVFeatureMap, mask):
        x = features + self.box_embed(descriptor)
        x = self.norm1(x + self.self_attn(x, mask))
        boxes_bev = boxes[:, [0, 1, 3, 4, 6]].unsqueeze(0)
        x = self.norm2(x + self.cross_attn(x.unsqueeze(0), boxes_bev, bev)[0])
        x = self.norm3(x + self.ffn(x))
        logits, deltas, taps = self.head(x)
        taps["decoder"] = x
        return x, logits, deltas, taps


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, scene_range):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        # refinement inputs are cut from the graph during training; switched off only to
        # differentiate through the full computation (finite-difference checks)
        self.detach_refinement = True
        self.register_buffer("range_lo", torch.tensor(scene_range[0::2], dtype=torch.float32))
        self.register_buffer("range_hi", torch.tensor(scene_range[1::2], dtype=torch.float32))

    def descriptor(self, boxes, class_vec):
        lo, hi = self.range_lo.to(boxes.dtype), self.range_hi.to(boxes.dtype)
        return torch.cat(
            [
                (boxes[:, :3] - lo) / (hi - lo),
                torch.log(boxes[:, 3:6]),
                torch.sin(boxes[:, 6:7]),
                torch.cos(boxes[:, 6:7]),
                class_vec,
            ],
            dim=-1,
        )

    def forward(self, boxes, features, class_vec, update_class, bev: BEVFeatureMap, mask, tap="ffn_last"):
        """Run all layers; returns one :class:`DecoderLayerOutput` per layer.

        ``update_class`` marks tokens whose class descriptor is replaced by the previous
        layer's (detached) class probabilities; the others keep ``class_vec``.
        """
        outputs = []
        ref = boxes.detach()
        x = features
        for i, layer in enumerate(self.layers):
            x, logits, deltas, taps = layer(x, self.descriptor(ref, class_vec), ref, bev, mask)
            pred = decode_boxes(deltas, ref)
            outputs.append(DecoderLayerOutput(i, pred, logits, deltas, ref, taps, tap))
            ref = pred.detach() if self.detach_refinement else pred
            probs = torch.sigmoid(logits.detach() if self.detach_refinement else logits)
            class_vec = torch.where(update_class[:, None], probs, class_vec)
        return outputs


def decoder_forward(decoder: Decoder, queries: QuerySet, encoded: BEVFeatureMap, attention_mask=None,
                    extra_boxes=None, extra_classes=None, tap="ffn_last", batch_index=0):
    """Decode ``queries`` (followed by optional extra box tokens such as noised GTs).

    Query tokens start with zero features and an all-zero class descriptor; extra tokens
    carry a fixed class vector (one-hot labels). ``attention_mask`` is a square boolean
    matrix over all tokens, True where attention is allowed.
    """
    boxes = queries.boxes
    features = queries.features
    dtype = boxes.dtype
    class_vec = boxes.new_zeros(len(queries), NUM_CLASSES)
    update = torch.ones(len(queries), dtype=torch.bool)
    if extra_boxes is not None and len(extra_boxes):
        n_extra = extra_boxes.shape[0]
        boxes = torch.cat([boxes, extra_boxes.to(dtype)])
        features = torch.cat([features, features.new_zeros(n_extra, features.shape[1])])
        class_vec = torch.cat([class_vec, extra_classes.to(dtype)])
        update = torch.cat([update, torch.zeros(n_extra, dtype=torch.bool)])
    n = boxes.shape[0]
    if attention_mask is None:
        attention_mask = torch.ones(n, n, dtype=torch.bool)
    attention_mask = torch.as_tensor(attention_mask, dtype=torch.bool)
    if attention_mask.shape != (n, n):
        raise ValueError(f"attention mask shape {tuple(attention_mask.shape)} does not match {n} tokens")
    if not attention_mask.any(dim=1).all():
        raise ValueError("every token must be allowed to attend to at least one token")
    bev = encoded if encoded.features.shape[0] == 1 else encoded.with_features(
        encoded.features[batch_index:batch_index + 1])
    return decoder(boxes, features, class_vec, update, bev, attention_mask, tap=tap)


class Projector(nn.Module):
    """Two-layer query projector ``g(x) = out(x + relu(hidden(x)))``."""

    def __init__(self, d_model: int):
        super().__init__()
        self.hidden = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x):
        return self.out(x + F.relu(self.hidden(x)))


class VoxelDETR(nn.Module):
    """Backbone, encoder, class-agnostic proposal head, refining decoder and contrast projector."""

    def __init__(self, cfg: ModelConfig, voxel_config):
        super().__init__()
        from .voxel_backbone import DenseBEVBackbone

        self.cfg = cfg
        self.backbone = DenseBEVBackbone(voxel_config, cfg.d_model, cfg.backbone_widths)
        self.encoder = Encoder(cfg)
        self.proposal_head = ProposalHead(cfg)
        self.decoder = Decoder(cfg, voxel_config.range)
        self.projector = Projector(cfg.d_model)

    def encode(self, dense: torch.Tensor):
        bev = self.backbone(dense)
        encoded = encoder_forward(bev, self.encoder)
        return encoded, self.proposal_head(encoded)
