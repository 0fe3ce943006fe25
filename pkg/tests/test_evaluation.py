import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conquer.evaluation import (
    EvalReport, evaluate, heading_weight, interpolated_ap, match_scene, read_report, write_report,
)
from conquer.geometry import Box3D
from conquer.inference import Detection
from evalcases import CASES, gt, hit, miss
from oracles import ap_101


def test_heading_weight_values():
    assert heading_weight(0.3, 0.3) == 1.0
    assert heading_weight(math.pi / 2, 0.0) == pytest.approx(0.5)
    assert heading_weight(math.pi, 0.0) == pytest.approx(0.0)
    # wrap: a full turn apart is the same heading
    assert heading_weight(0.1 + 2 * math.pi, 0.1) == pytest.approx(1.0)
    assert heading_weight(3.0, -3.0) == pytest.approx(1 - (2 * math.pi - 6) / math.pi)


def test_interpolated_ap_grid_arithmetic():
    assert interpolated_ap([], []) == 0.0
    assert interpolated_ap([0.5], [1.0]) == pytest.approx(51 / 101)
    # precision is lifted by a later, better point
    assert interpolated_ap([0.5, 1.0], [0.5, 1.0]) == pytest.approx(1.0)


@pytest.mark.parametrize("name", sorted(CASES))
def test_micro_scene_hand_values(name):
    dets, gts, cls, ap, aph = CASES[name]
    report = evaluate([dets], [gts])
    assert report.ap[cls] == pytest.approx(ap, abs=1e-12)
    assert report.aph[cls] == pytest.approx(aph, abs=1e-12)
    # the independent walk-the-ranking oracle agrees
    tp, w = match_scene(dets, gts, report.iou_thresholds)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    want = ap_101([tp[i] for i in order], [w[i] for i in order], len(gts))
    assert (report.ap[cls], report.aph[cls]) == pytest.approx(want, abs=1e-12)


def test_perfect_detector_counts():
    dets, gts, cls, _, _ = CASES["perfect"]
    r = evaluate([dets], [gts])
    assert r.false_positives_per_scene == 0
    assert r.predictions_per_scene == 2
    assert r.recall[cls] == 1.0


def test_zero_detections():
    g = [gt(0.0), gt(4.0, cls=0, size=4.0)]
    r = evaluate([[], []], [g, []])
    assert r.ap[0] == r.ap[1] == 0.0
    assert math.isnan(r.ap[2])
    assert r.predictions_per_scene == 0.0
    assert r.mean_ap == 0.0


def test_no_scenes_and_misaligned():
    r = evaluate([], [])
    assert r.n_scenes == 0 and math.isnan(r.mean_ap)
    with pytest.raises(ValueError):
        evaluate([[]], [])


def test_unknown_class_signals():
    with pytest.raises(ValueError):
        evaluate([[hit(gt(0.0), 0.5)]], [[gt(0.0)]], iou_thresholds={0: 0.7})
    with pytest.raises(ValueError):
        evaluate([[]], [[]], iou_thresholds={5: 0.5})


def test_iou_threshold_decides_tp():
    g = Box3D(0, 0, 0, 4, 2, 1.5, class_id=0)
    shifted = Detection(g.replace(cx=0.8), 0.9, 0)  # IoU 3.2/4.8 = 2/3
    assert evaluate([[shifted]], [[g]]).ap[0] == 0.0
    assert evaluate([[shifted]], [[g]], iou_thresholds={0: 0.6, 1: 0.5, 2: 0.5}).ap[0] == 1.0


def test_each_gt_matched_once():
    g = gt(0.0)
    r = evaluate([[hit(g, 0.9), hit(g, 0.8)]], [[g]])
    assert r.false_positives_per_scene == 1
    assert r.ap[1] == 1.0


def test_tied_scores_form_one_operating_point():
    g = gt(0.0)
    a = evaluate([[hit(g, 0.5), miss(3.0, 0.5)]], [[g]])
    b = evaluate([[miss(3.0, 0.5), hit(g, 0.5)]], [[g]])
    assert a.ap[1] == b.ap[1] == 0.5


def random_scene(rng, n_gt, n_det):
    gts = [Box3D(*rng.uniform(-10, 10, 2), 0.0, *rng.uniform(0.8, 4, 2), 1.5, rng.uniform(-3, 3),
                 class_id=int(rng.integers(3))) for _ in range(n_gt)]
    dets = []
    for _ in range(n_det):
        if gts and rng.uniform() < 0.6:
            g = gts[rng.integers(len(gts))]
            box = g.replace(cx=g.cx + rng.normal(0, 0.2), cy=g.cy + rng.normal(0, 0.2),
                            heading=g.heading + rng.normal(0, 1.0))
        else:
            box = Box3D(*rng.uniform(-10, 10, 2), 0.0, 2, 1, 1.5, 0.0, class_id=int(rng.integers(3)))
        dets.append(Detection(box, float(rng.choice([0.2, 0.4, 0.5, 0.7, 0.9, rng.uniform()])), box.class_id))
    return dets, gts


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_aph_never_exceeds_ap(seed):
    rng = np.random.default_rng(seed)
    scenes = [random_scene(rng, rng.integers(0, 6), rng.integers(0, 10)) for _ in range(3)]
    r = evaluate([s[0] for s in scenes], [s[1] for s in scenes])
    for c in r.ap:
        if not math.isnan(r.ap[c]):
            assert r.aph[c] <= r.ap[c] + 1e-12


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_lowest_scored_false_positive_never_raises_ap(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_scene(rng, rng.integers(1, 6), rng.integers(0, 10))
    before = evaluate([dets], [gts])
    lowest = min([d.score for d in dets], default=1.0)
    c = int(rng.integers(3))
    fp = Detection(Box3D(50, 50, 0, 1, 1, 1, class_id=c), lowest * 0.5, c)
    after = evaluate([dets + [fp]], [gts])
    for k in before.ap:
        if not math.isnan(before.ap[k]):
            assert after.ap[k] <= before.ap[k] + 1e-12


def shuffle_keeping_ties(dets, rng):
    """Random permutation that keeps equal-score detections in their original relative order."""
    slots = list(rng.permutation(len(dets)))
    out = [None] * len(dets)
    for score in {d.score for d in dets}:
        group = [d for d in dets if d.score == score]
        pos = sorted(slots[i] for i, d in enumerate(dets) if d.score == score)
        for p, d in zip(pos, group):
            out[p] = d
    return out


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_invariant_to_scene_and_detection_order(seed):
    rng = np.random.default_rng(seed)
    scenes = [random_scene(rng, rng.integers(0, 5), rng.integers(0, 8)) for _ in range(4)]
    base = evaluate([s[0] for s in scenes], [s[1] for s in scenes])
    perm = rng.permutation(len(scenes))
    shuffled = [(shuffle_keeping_ties(scenes[i][0], rng), scenes[i][1]) for i in perm]
    other = evaluate([s[0] for s in shuffled], [s[1] for s in shuffled])
    for c in base.ap:
        assert base.ap[c] == pytest.approx(other.ap[c], nan_ok=True, abs=1e-12)
        assert base.aph[c] == pytest.approx(other.aph[c], nan_ok=True, abs=1e-12)
    assert base.predictions_per_scene == other.predictions_per_scene
    assert base.false_positives_per_scene == other.false_positives_per_scene


def test_report_round_trip(tmp_path):
    dets, gts, *_ = CASES["interleaved"]
    r = evaluate([dets, []], [gts, [gt(1.0, cls=0, size=4.0)]])
    path = tmp_path / "report.txt"
    write_report(path, r)
    back = read_report(path)
    flat = r.to_flat()
    assert set(back) == set(flat)
    for k, v in flat.items():
        if isinstance(v, float) and math.isnan(v):
            assert math.isnan(back[k])
        else:
            assert back[k] == v
    assert back["difficulty"] == "single"
    assert isinstance(r, EvalReport)
