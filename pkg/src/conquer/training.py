"""Seeded training loop: per-scene losses over every prediction head, AdamW + one-cycle, EMA decoder."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ExperimentConfig
from .geometry import boxes_to_arrays
from .inference import finalize_predictions, nms
from .losses import detection_loss
from .matching import match_layer
from .query_contrast import (
    decode_with_groups, embed_gts_and_queries, ema_update, make_ema, make_noised_groups, denoising_loss,
    query_contrast_loss,
)
from .scene_synth import Scene, extract_object_bank, paste_augment
from .transformer import DecoderLayerOutput, VoxelDETR, propose_queries
from .voxel_backbone import voxelize, voxels_to_dense

log = logging.getLogger(__name__)

# independent RNG streams spawned from the experiment seed
STREAMS = ("init", "shuffle", "paste", "noise")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


def make_streams(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


def model_dtype(config: ExperimentConfig):
    return torch.float64 if config.train.deterministic else torch.float32


def build_model(config: ExperimentConfig, init_rng: np.random.Generator = None):
    """Live model plus the EMA copy of its decoder, initialized from ``init_rng``."""
    if init_rng is None:
        init_rng = make_streams(config.seed)["init"]
    torch.manual_seed(int(init_rng.integers(2**62)))
    model = VoxelDETR(config.model, config.voxel).to(model_dtype(config))
    ema = make_ema(model.decoder)
    return model, ema


def scene_tensor(scenes, config: ExperimentConfig, dtype=torch.float32) -> torch.Tensor:
    dense = np.stack([voxels_to_dense(voxelize(s.points, config.voxel)) for s in scenes])
    return torch.as_tensor(dense, dtype=dtype)


def proposal_layer(proposals, batch_index: int) -> DecoderLayerOutput:
    """View the dense per-cell proposals of one scene as a class-agnostic prediction head."""
    return DecoderLayerOutput(
        layer_index=-1,
        boxes=proposals.boxes[batch_index],
        class_logits=proposals.logits[batch_index][:, None],
        deltas=proposals.deltas[batch_index],
        refined_from=proposals.anchors,
    )


def scene_losses(model, ema_decoder, encoded, proposals, batch_index, scene: Scene, config: ExperimentConfig,
                 noise_rng: np.random.Generator) -> dict:
    """All loss terms for one scene; returns a dict of scalar tensors including ``total``."""
    cc = config.contrast
    gt_params, gt_labels = boxes_to_arrays(scene.gts)
    n_gt = len(scene.gts)

    prop = proposal_layer(proposals, batch_index)
    agnostic = np.zeros_like(gt_labels)
    assign = match_layer(prop, gt_params, agnostic, config.loss)
    proposal_loss, _ = detection_loss(prop, gt_params, agnostic, assign, config.loss, class_agnostic=True)

    queries = propose_queries(proposals, config.train.k, batch_index, config.model.d_model)
    embeds = groups = None
    if cc.enabled and n_gt > 0:
        groups = make_noised_groups(scene.gts, config.noise, cc.T, noise_rng, cc.include_original_gts)
        embeds, decoded = embed_gts_and_queries(groups, queries, encoded, model, ema_decoder, cc, batch_index)
    else:
        decoded = decode_with_groups(model.decoder, queries, encoded, None, cc.tap, batch_index)

    zero = proposal_loss * 0.0
    det, qc, dn = zero, zero, zero
    for layer_index, layer in enumerate(decoded.query_layers):
        assign = match_layer(layer, gt_params, gt_labels, config.loss)
        det = det + detection_loss(layer, gt_params, gt_labels, assign, config.loss)[0]
        if embeds is not None and cc.qc_loss_weight > 0:
            qc = qc + query_contrast_loss(
                embeds.gt_embeds[layer_index], embeds.projected_queries[layer_index], assign, cc,
                embeds.gt_boxes[layer_index], embeds.query_boxes[layer_index],
            )
        if embeds is not None and cc.dn_loss_weight > 0:
            dn = dn + denoising_loss(decoded.gt_layers[layer_index], gt_params, gt_labels, groups.origin_index,
                                     config.loss)
    total = proposal_loss + det
    if embeds is not None:
        total = total + cc.qc_loss_weight * qc + cc.dn_loss_weight * dn
    return {"total": total, "proposal": proposal_loss, "det": det, "qc": qc, "dn": dn}


def batch_losses(model, ema_decoder, scenes, config: ExperimentConfig, noise_rng) -> dict:
    dtype = next(model.parameters()).dtype
    encoded, proposals = model.encode(scene_tensor(scenes, config, dtype))
    terms = [scene_losses(model, ema_decoder, encoded, proposals, b, s, config, noise_rng)
             for b, s in enumerate(scenes)]
    return {k: sum(t[k] for t in terms) / len(terms) for k in terms[0]}


@dataclass
class TrainState:
    model: VoxelDETR
    ema: torch.nn.Module
    optimizer: torch.optim.Optimizer
    scheduler: object
    step: int = 0
    streams: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


def steps_per_epoch(n_scenes: int, batch_size: int) -> int:
    return math.ceil(n_scenes / batch_size)


def init_state(config: ExperimentConfig, n_scenes: int) -> TrainState:
    streams = make_streams(config.seed)
    model, ema = build_model(config, streams["init"])
    tc = config.train
    optimizer = torch.optim.AdamW(model.parameters(), lr=tc.max_lr / tc.div_factor, weight_decay=tc.weight_decay)
    total = tc.epochs * steps_per_epoch(n_scenes, tc.batch_size)
    scheduler = None
    if total > 0:
        scheduler = torch.optim.lr_scheduler.OneCycleLR(
            optimizer, max_lr=tc.max_lr, total_steps=total, pct_start=tc.pct_start,
            div_factor=tc.div_factor, final_div_factor=tc.final_div_factor,
        )
    return TrainState(model, ema, optimizer, scheduler, 0, streams, [])


def _deterministic(enabled: bool):
    torch.use_deterministic_algorithms(enabled)


def train_step(state: TrainState, scenes, config: ExperimentConfig, epoch: int = 0) -> dict:
    model = state.model
    model.train()
    snapshot = {"step": state.step, "epoch": epoch, "scene_seeds": [s.seed for s in scenes]}
    try:
        losses = batch_losses(model, state.ema, scenes, config, state.streams["noise"])
    except ValueError as err:
        # matching and the projector reject non-finite inputs before a loss exists
        if all(torch.isfinite(p).all() for p in model.parameters()):
            raise
        raise NonFiniteLossError(f"non-finite weights at step {state.step}: {err}", snapshot) from err
    total = losses["total"]
    if not torch.isfinite(total):
        snapshot.update({k: float(v) for k, v in losses.items()})
        raise NonFiniteLossError(f"non-finite loss at step {state.step}: {snapshot}", snapshot)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), config.train.grad_clip)
    lr = state.optimizer.param_groups[0]["lr"]
    state.optimizer.step()
    if state.scheduler is not None:
        state.scheduler.step()
    ema_update(model.decoder, state.ema, config.contrast.ema_momentum)
    state.step += 1
    record = {"step": state.step, "epoch": epoch, "lr": lr}
    record.update({k: float(v.detach()) for k, v in losses.items()})
    return record


def train(config: ExperimentConfig, scenes, log_path=None, state: TrainState = None,
          diagnostic_path=None) -> TrainState:
    """Train on ``scenes`` for ``config.train.epochs`` epochs.

    Each epoch visits the scenes in a freshly shuffled order; every scene gets up to
    ``paste_per_scene`` objects pasted from the object bank of the training set, except
    in the last epoch when ``fade_augment`` is set. Metric records go to ``log_path``
    as JSON lines (one per ``log_every`` steps).
    """
    tc = config.train
    scenes = list(scenes)
    if state is None:
        state = init_state(config, len(scenes))
    bank = extract_object_bank(scenes) if tc.paste_per_scene > 0 else []
    prev = torch.are_deterministic_algorithms_enabled()
    _deterministic(tc.deterministic or prev)
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(tc.epochs):
            order = state.streams["shuffle"].permutation(len(scenes))
            paste = tc.paste_per_scene > 0 and bank and not (tc.fade_augment and epoch == tc.epochs - 1)
            for start in range(0, len(order), tc.batch_size):
                batch = [scenes[i] for i in order[start:start + tc.batch_size]]
                if paste:
                    batch = [paste_augment(s, bank, tc.paste_per_scene, state.streams["paste"], config.scene.range)
                             for s in batch]
                try:
                    record = train_step(state, batch, config, epoch)
                except NonFiniteLossError as err:
                    if diagnostic_path is not None:
                        torch.save({"snapshot": err.snapshot, "live": state.model.state_dict()}, diagnostic_path)
                    raise
                state.history.append(record)
                if log_file is not None and state.step % tc.log_every == 0:
                    log_file.write(json.dumps(record, sort_keys=True) + "\n")
                    log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
        _deterministic(prev)
    return state


@torch.no_grad()
def predict_scenes(model, scenes, config: ExperimentConfig, mode=None, param=None, batch_size: int = 8) -> list:
    """Final detections per scene (model in eval mode, no gradients)."""
    ec = config.eval
    mode = ec.mode if mode is None else mode
    param = ec.param if param is None else param
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    scenes = list(scenes)
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        encoded, proposals = model.encode(scene_tensor(chunk, config, dtype))
        for b in range(len(chunk)):
            queries = propose_queries(proposals, config.train.k, b, config.model.d_model)
            decoded = decode_with_groups(model.decoder, queries, encoded, None, config.contrast.tap, b)
            dets = finalize_predictions(decoded.query_layers[-1], mode, param)
            if ec.nms_classes:
                dets = nms(dets, ec.nms_score, ec.nms_iou, classes=set(ec.nms_classes))
            out.append(dets)
    return out


def save_checkpoint(state: TrainState, config: ExperimentConfig, path) -> None:
    """Atomic write (temp file then rename) of weights, optimizer and scheduler state, RNG streams and config."""
    payload = {
        "live": state.model.state_dict(),
        "ema": state.ema.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "scheduler": state.scheduler.state_dict() if state.scheduler is not None else None,
        "step": state.step,
        "streams": {name: rng.bit_generator.state for name, rng in state.streams.items()},
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


class CheckpointMismatchError(ValueError):
    pass


def load_checkpoint(path, config: ExperimentConfig = None, n_scenes: int = None) -> tuple:
    """Restore ``(state, config)``; a given ``config`` must hash to the stored one."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    stored = ExperimentConfig.from_dict(payload["config"])
    if config is not None and config.config_hash() != payload["config_hash"]:
        raise CheckpointMismatchError(
            f"checkpoint config hash {payload['config_hash'][:12]} does not match {config.config_hash()[:12]}"
        )
    config = stored
    state = init_state(config, n_scenes if n_scenes is not None else config.train.n_train)
    state.model.load_state_dict(payload["live"])
    state.ema.load_state_dict(payload["ema"])
    state.optimizer.load_state_dict(payload["optimizer"])
    if state.scheduler is not None and payload["scheduler"] is not None:
        state.scheduler.load_state_dict(payload["scheduler"])
    state.step = payload["step"]
    for name, rng_state in payload.get("streams", {}).items():
        state.streams[name].bit_generator.state = rng_state
    return state, config
