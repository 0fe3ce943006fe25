import math

import numpy as np
import pytest
import torch

from conquer.config import PRESETS, ExperimentConfig, load_config, preset, save_config
from conquer.scene_synth import generate_scene
from conquer.training import (
    CheckpointMismatchError, NonFiniteLossError, build_model, init_state, load_checkpoint, make_streams,
    predict_scenes, save_checkpoint, scene_losses, scene_tensor, steps_per_epoch, train, train_step,
)
from conquer.voxel_backbone import ConfigurationError
from fd import directional_check
from tiny import tiny_config


def scenes_for(config, seeds=None):
    return [generate_scene(config.scene, s) for s in (seeds if seeds is not None else config.train_seeds)]


def test_defaults_and_dotted_overrides():
    c = ExperimentConfig()
    assert (c.contrast.tau, c.contrast.T, c.train.k, c.train.epochs) == (0.7, 3, 100, 6)
    c2 = c.with_overrides(["contrast.tau=0.5", "train.epochs=2", "seed=9", "model.backbone_widths=[4, 8, 8]"])
    assert (c2.contrast.tau, c2.train.epochs, c2.seed, c2.model.backbone_widths) == (0.5, 2, 9, (4, 8, 8))
    assert c.contrast.tau == 0.7  # original untouched
    for bad in (["contrast.nope=1"], ["nosection.x=1"], ["contrast.tau"], ["train.batch_size=0"]):
        with pytest.raises(ConfigurationError):
            c.with_overrides(bad)


def test_scientific_notation_values(tmp_path):
    c = ExperimentConfig().with_overrides(["train.max_lr=2e-3"])
    assert c.train.max_lr == 0.002
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  max_lr: 5e-4\n")
    assert load_config(path).train.max_lr == 0.0005


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ExperimentConfig().with_overrides({"eval.eval_seed_start": 10})  # overlaps train seeds 0..399
    with pytest.raises(ConfigurationError):
        ExperimentConfig().with_overrides({"train.k": 10_000})
    with pytest.raises(ConfigurationError):
        ExperimentConfig().with_overrides({"eval.mode": "all"})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"optimizer": {}})


def test_yaml_round_trip_and_hash(tmp_path):
    c = tiny_config(contrast__tau=0.3, seed=4)
    path = tmp_path / "c.yaml"
    save_config(c, path)
    back = load_config(path)
    assert back == c
    assert back.config_hash() == c.config_hash()
    assert load_config(path, ["seed=5"]).config_hash() != c.config_hash()
    assert c.config_hash() == tiny_config(contrast__tau=0.3, seed=4).config_hash()


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_build(name):
    c = preset(name)
    assert isinstance(c, ExperimentConfig)
    assert c.contrast.enabled == (name != "baseline")


def test_unknown_preset():
    with pytest.raises(ConfigurationError):
        preset("everything")


def test_seed_streams_are_independent_and_reproducible():
    a, b = make_streams(3), make_streams(3)
    assert a.keys() == b.keys()
    draws = {k: a[k].integers(2**31, size=4).tolist() for k in a}
    assert draws == {k: b[k].integers(2**31, size=4).tolist() for k in b}
    assert len({tuple(v) for v in draws.values()}) == len(draws)


def test_zero_epochs_gives_empty_log_and_loadable_checkpoint(tmp_path):
    c = tiny_config(train__epochs=0)
    log = tmp_path / "m.jsonl"
    state = train(c, scenes_for(c), log_path=log)
    assert state.step == 0 and state.history == [] and log.read_text() == ""
    save_checkpoint(state, c, tmp_path / "ck.pt")
    restored, _ = load_checkpoint(tmp_path / "ck.pt", c, n_scenes=4)
    assert restored.step == 0


def test_train_logs_every_step_and_schedule(tmp_path):
    c = tiny_config(train__epochs=2)
    state = train(c, scenes_for(c), log_path=tmp_path / "m.jsonl")
    n = 2 * steps_per_epoch(4, 2)
    assert state.step == n and len(state.history) == n
    rec = state.history[0]
    assert set(rec) == {"step", "epoch", "lr", "total", "proposal", "det", "qc", "dn"}
    assert rec["lr"] == pytest.approx(c.train.max_lr / c.train.div_factor)
    assert all(math.isfinite(r["total"]) for r in state.history)
    assert all(r["qc"] > 0 and r["dn"] > 0 for r in state.history)


def test_deterministic_runs_are_bit_identical(tmp_path):
    c = tiny_config(train__deterministic=True, train__epochs=2)
    scenes = scenes_for(c)
    train(c, scenes, log_path=tmp_path / "a.jsonl")
    train(c, scenes, log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    other = c.with_overrides({"seed": 1})
    train(other, scenes, log_path=tmp_path / "c.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


def test_checkpoint_round_trip_bit_exact_and_resume(tmp_path):
    c = tiny_config(train__deterministic=True, train__epochs=2)
    scenes = scenes_for(c)
    state = init_state(c, len(scenes))
    for _ in range(2):
        train_step(state, scenes[:2], c)
    path = tmp_path / "ck.pt"
    save_checkpoint(state, c, path)
    restored, rc = load_checkpoint(path, c, n_scenes=len(scenes))
    assert rc == c and restored.step == state.step
    for a, b in ((state.model, restored.model), (state.ema, restored.ema)):
        sa, sb = a.state_dict(), b.state_dict()
        assert sa.keys() == sb.keys()
        assert all(torch.equal(sa[k], sb[k]) for k in sa)
    # resuming gives the same next step as continuing
    r1 = train_step(state, scenes[2:], c)
    r2 = train_step(restored, scenes[2:], c)
    assert r1 == r2
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(path, c.with_overrides({"contrast.tau": 0.5}))


def test_baseline_paths_coincide(tmp_path):
    # T=0 and zero loss weights with T=3 both switch the contrast path off entirely
    base = tiny_config(contrast__T=0, contrast__qc_loss_weight=0.0, contrast__dn_loss_weight=0.0,
                       train__deterministic=True)
    zero_w = tiny_config(contrast__qc_loss_weight=0.0, contrast__dn_loss_weight=0.0, train__deterministic=True)
    scenes = scenes_for(base)
    a = train(base, scenes).history
    b = train(zero_w, scenes).history
    assert a == b
    assert all(r["qc"] == 0.0 and r["dn"] == 0.0 for r in a)


def test_non_finite_loss_aborts_with_snapshot(tmp_path):
    c = tiny_config()
    scenes = scenes_for(c)
    state = init_state(c, len(scenes))
    with torch.no_grad():
        next(state.model.decoder.parameters()).fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as err:
        train(c, scenes, state=state, diagnostic_path=tmp_path / "diag.pt")
    assert err.value.snapshot["step"] == 0
    assert set(err.value.snapshot["scene_seeds"]) <= {s.seed for s in scenes}
    assert (tmp_path / "diag.pt").exists()


def test_ema_gets_no_gradient_and_tracks_live():
    c = tiny_config(contrast__ema_momentum=0.5)
    scenes = scenes_for(c)
    state = init_state(c, len(scenes))
    before = {k: v.clone() for k, v in state.ema.state_dict().items()}
    train_step(state, scenes[:2], c)
    assert all(p.grad is None and not p.requires_grad for p in state.ema.parameters())
    live = state.model.decoder.state_dict()
    for k, v in state.ema.state_dict().items():
        if v.is_floating_point():
            torch.testing.assert_close(v, 0.5 * before[k] + 0.5 * live[k])


def test_scene_losses_finite_differences_downstream_of_proposals():
    # query boxes are a stop-gradient of the proposal head, so the encoder output is
    # pinned and every parameter after it (decoder, heads, projector) is checked
    c = tiny_config(train__deterministic=True, model__dec_layers=2, train__k=12,
                    train__paste_per_scene=0)
    scene = generate_scene(c.scene, 11)
    model, ema = build_model(c)
    model.decoder.detach_refinement = False
    with torch.no_grad():
        encoded, proposals = model.encode(scene_tensor([scene], c, torch.float64))

    def f():
        return scene_losses(model, ema, encoded, proposals, 0, scene, c, np.random.default_rng(0))["total"]

    params = [p for n, p in model.named_parameters() if n.split(".")[0] in ("decoder", "projector")]
    assert f().requires_grad
    assert directional_check(f, params, n_dirs=4, eps=1e-6) < 1e-3


def test_predict_scenes_respects_mode_and_nms():
    c = tiny_config()
    scenes = scenes_for(c, [100_000, 100_001])
    model, _ = build_model(c)
    top = predict_scenes(model, scenes, c, "topN", 5)
    assert [len(d) for d in top] == [5, 5]
    thr = predict_scenes(model, scenes, c, "threshold", 0.0)
    assert [len(d) for d in thr] == [c.train.k] * 2
    nms_c = c.with_overrides({"eval.nms_classes": [0, 1, 2]})
    assert all(len(a) <= len(b) for a, b in zip(predict_scenes(model, scenes, nms_c, "threshold", 0.0), thr))
