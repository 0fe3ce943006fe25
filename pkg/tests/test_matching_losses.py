import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conquer.geometry import Box3D, giou3d
from conquer.losses import DetLossWeights, detection_loss, sigmoid_focal_loss
from conquer.matching import Assignment, brute_force_match, hungarian_match, match_cost
from conquer.transformer import DecoderLayerOutput
from fd import directional_check
from oracles import encode as _encode
from oracles import smooth_l1 as _smooth_l1


def test_hungarian_examples():
    assert hungarian_match(np.eye(3) * -1 + 2).pairs == [(0, 0), (1, 1), (2, 2)]
    a = hungarian_match([[1, 2], [2, 1]])
    assert a.pairs == [(0, 0), (1, 1)] and a.total_cost == 2.0
    assert hungarian_match(np.ones((3, 5))).pairs == [(0, 0), (1, 1), (2, 2)]
    assert hungarian_match(np.ones((3, 5))).unmatched_queries == [3, 4]


def test_brute_force_mirrors_hungarian_and_edge_cases():
    for m in (np.eye(3) * -1 + 2, [[1, 2], [2, 1]], np.ones((3, 5))):
        h, b = hungarian_match(m), brute_force_match(m)
        assert h.pairs == b.pairs and h.total_cost == b.total_cost
    assert brute_force_match(np.zeros((0, 4))).pairs == []
    assert brute_force_match([[3.0]]).pairs == [(0, 0)]
    with pytest.raises(ValueError):
        brute_force_match(np.zeros((9, 10)))


@pytest.mark.parametrize("bad", [[[np.nan, 1.0]], [[np.inf, 1.0]], [[1.0], [2.0]], [1.0, 2.0]])
def test_rejects_invalid(bad):
    with pytest.raises(ValueError):
        hungarian_match(bad)


@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(0, 3), st.booleans())
@settings(max_examples=150, deadline=None)
def test_hungarian_equals_brute_force(seed, n, extra, integer):
    rng = np.random.default_rng(seed)
    cost = rng.integers(0, 4, (n, n + extra)).astype(float) if integer else rng.normal(size=(n, n + extra))
    h, b = hungarian_match(cost), brute_force_match(cost)
    assert h.total_cost == b.total_cost
    assert h.pairs == b.pairs


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_no_single_swap_improves(seed):
    rng = np.random.default_rng(seed)
    cost = rng.normal(size=(5, 8))
    a = hungarian_match(cost)
    cols = dict(a.pairs)
    for i in range(5):
        for j in range(5):  # swap two rows' columns
            if i != j:
                assert cost[i, cols[j]] + cost[j, cols[i]] >= cost[i, cols[i]] + cost[j, cols[j]] - 1e-12
        for free in a.unmatched_queries:  # move a row to a free column
            assert cost[i, free] >= cost[i, cols[i]] - 1e-12


def boxes_tensor(rng, n):
    return torch.tensor(np.column_stack([rng.uniform(-3, 3, (n, 3)), rng.uniform(0.5, 3, (n, 3)),
                                         rng.uniform(-3, 3, n)]))


def test_match_cost_perfect_and_swapped():
    gt = torch.tensor([[0.0, 0, 0, 4, 2, 1.5, 0.2], [8.0, 0, 0, 1, 1, 1.7, 0]])
    logits = torch.full((2, 3), -5.0)
    logits[0, 0] = logits[1, 1] = 5.0
    c = match_cost(gt.clone(), logits, gt, [0, 1])
    assert int(c[0].argmin()) == 0 and int(c[1].argmin()) == 1
    swapped = match_cost(gt.flip(0), logits.flip(0), gt, [0, 1])
    assert swapped[0, 1] < swapped[0, 0] and swapped[1, 0] < swapped[1, 1]


def test_match_cost_term_by_term():
    rng = np.random.default_rng(4)
    preds, refs, gts = boxes_tensor(rng, 5), boxes_tensor(rng, 5), boxes_tensor(rng, 3)
    logits = torch.tensor(rng.normal(size=(5, 3)))
    labels = [2, 0, 1]
    deltas = torch.tensor([_encode(p.tolist(), r.tolist()) for p, r in zip(preds, refs)])
    got = match_cost(preds, logits, gts, labels, deltas, refs).numpy()
    for g in range(3):
        for q in range(5):
            p = 1 / (1 + math.exp(-float(logits[q, labels[g]])))
            cls = 0.25 * (1 - p) ** 2 * -math.log(p + 1e-8) - 0.75 * p ** 2 * -math.log(1 - p + 1e-8)
            target = _encode(gts[g].tolist(), refs[q].tolist())
            reg = sum(_smooth_l1(a - b) for a, b in zip(deltas[q].tolist(), target))
            gi = giou3d(Box3D(*preds[q].tolist()), Box3D(*gts[g].tolist()))
            assert got[g, q] == pytest.approx(cls + 4 * reg + 2 * (1 - gi), abs=1e-9)


def layer_output(boxes, logits, refs):
    from conquer.box_torch import encode_boxes
    return DecoderLayerOutput(0, boxes, logits, encode_boxes(boxes, refs), refs)


def test_detection_loss_empty_gt():
    rng = np.random.default_rng(0)
    refs = boxes_tensor(rng, 4)
    logits = torch.tensor(rng.normal(size=(4, 3)))
    out = layer_output(refs.clone(), logits, refs)
    total, comp = detection_loss(out, np.zeros((0, 7)), np.zeros(0, dtype=int), Assignment([], list(range(4))))
    assert comp["l1"] == 0 and comp["giou"] == 0
    assert torch.allclose(total, sigmoid_focal_loss(logits, torch.zeros_like(logits)).sum())


def test_detection_loss_optimum():
    gts = torch.tensor([[0.0, 0, 0, 4, 2, 1.5, 0], [5.0, 1, 0, 1, 1, 1.7, 0]], dtype=torch.float64)
    logits = torch.full((3, 3), -20.0, dtype=torch.float64)
    logits[0, 1] = logits[2, 0] = 20.0
    boxes = torch.stack([gts[1], gts[0] + 3, gts[0]])
    out = layer_output(boxes, logits, boxes.clone())
    assign = Assignment([(0, 2), (1, 0)], [1])
    total, _ = detection_loss(out, gts, [0, 1], assign)
    assert float(total) < 1e-3


def test_detection_loss_term_oracle_and_permutation():
    rng = np.random.default_rng(5)
    refs, preds, gts = boxes_tensor(rng, 6), boxes_tensor(rng, 6), boxes_tensor(rng, 3)
    logits = torch.tensor(rng.normal(size=(6, 3)))
    labels = np.array([1, 0, 2])
    out = layer_output(preds, logits, refs)
    assign = Assignment([(0, 4), (1, 0), (2, 3)], [1, 2, 5])
    total, comp = detection_loss(out, gts, labels, assign)
    targets = np.zeros((6, 3))
    for g, q in assign.pairs:
        targets[q, labels[g]] = 1
    p = 1 / (1 + np.exp(-logits.numpy()))
    pt = p * targets + (1 - p) * (1 - targets)
    ce = -np.log(pt)
    focal = ((0.25 * targets + 0.75 * (1 - targets)) * ce * (1 - pt) ** 2).sum() / 3
    l1 = sum(_smooth_l1(a - b) for g, q in assign.pairs
             for a, b in zip(_encode(preds[q].tolist(), refs[q].tolist()), _encode(gts[g].tolist(), refs[q].tolist()))) / 3
    gi = sum(1 - giou3d(Box3D(*preds[q].tolist()), Box3D(*gts[g].tolist())) for g, q in assign.pairs) / 3
    assert float(comp["focal"]) == pytest.approx(focal, abs=1e-9)
    assert float(comp["l1"]) == pytest.approx(l1, abs=1e-9)
    assert float(comp["giou"]) == pytest.approx(gi, abs=1e-9)
    assert float(total) == pytest.approx(focal + 4 * l1 + 2 * gi, abs=1e-9)
    perm = [2, 0, 1]
    inv = {old: new for new, old in enumerate(perm)}
    assign_p = Assignment(sorted((inv[g], q) for g, q in assign.pairs), assign.unmatched_queries)
    total_p, _ = detection_loss(out, gts[perm], labels[perm], assign_p)
    assert float(total_p) == pytest.approx(float(total), abs=1e-12)


def test_detection_loss_gradient():
    rng = np.random.default_rng(6)
    refs, gts = boxes_tensor(rng, 5), boxes_tensor(rng, 2)
    preds = (refs + torch.tensor(rng.normal(scale=0.2, size=(5, 7)))).requires_grad_(True)
    logits = torch.tensor(rng.normal(size=(5, 3)), requires_grad=True)
    assign = Assignment([(0, 1), (1, 3)], [0, 2, 4])

    def f():
        from conquer.box_torch import encode_boxes
        out = DecoderLayerOutput(0, preds, logits, encode_boxes(preds, refs), refs)
        return detection_loss(out, gts, [0, 2], assign)[0]

    assert directional_check(f, [preds, logits], n_dirs=6) < 1e-3


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        DetLossWeights(alpha=-1)
