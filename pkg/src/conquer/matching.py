"""One-to-one assignment of ground truths to queries.

:func:`hungarian_match` is a shortest-augmenting-path Kuhn-Munkres solver with dual
potentials; the potentials are reused to pick the lexicographically smallest optimal
assignment when several are tied. :func:`brute_force_match` enumerates injections
and serves as its test oracle.
"""
from __future__ import annotations

import functools
import itertools
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch

from .box_torch import encode_boxes, pairwise_giou
from .losses import FOCAL_ALPHA, FOCAL_GAMMA, SMOOTH_L1_BETA, DetLossWeights, smooth_l1

BRUTE_FORCE_MAX_ROWS = 8
BRUTE_FORCE_MAX_COLS = 10


@dataclass
class Assignment:
    pairs: list  # (gt_index, query_index), sorted by gt_index
    unmatched_queries: list = field(default_factory=list)
    total_cost: float = 0.0

    @property
    def gt_indices(self):
        return [g for g, _ in self.pairs]

    @property
    def query_indices(self):
        return [q for _, q in self.pairs]

    def query_for_gt(self) -> dict:
        return dict(self.pairs)


def _validate(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains NaN or infinite entries")
    if cost.shape[0] > cost.shape[1]:
        raise ValueError(f"more ground truths ({cost.shape[0]}) than queries ({cost.shape[1]})")
    return cost


def _total(cost, cols) -> float:
    # row-order sequential sum, shared by both solvers so totals compare exactly
    total = 0.0
    for i, j in enumerate(cols):
        total += float(cost[i, j])
    return total


def _make_assignment(cost, cols) -> Assignment:
    m = cost.shape[1]
    used = set(int(c) for c in cols)
    return Assignment(
        pairs=[(i, int(j)) for i, j in enumerate(cols)],
        unmatched_queries=[j for j in range(m) if j not in used],
        total_cost=_total(cost, cols),
    )


def _kuhn_munkres(cost):
    """Return ``(col_of_row, u, v)`` for an ``n x m`` matrix with ``n <= m``."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) holding column j; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of[p[j] - 1] = j - 1
    return col_of, u[1:], v[1:]


def _lexicographic(cost, col_of, u, v):
    """Move to the lexicographically smallest optimal assignment.

    Optimal assignments are exactly the perfect matchings of the tight graph (zero
    reduced cost) once free columns are thought of as held by interchangeable dummy
    rows; a dummy can hold any column whose potential is zero.
    """
    n, m = cost.shape
    scale = max(1.0, float(np.abs(cost).max()))
    eps = 1e-9 * scale
    tight = (cost - u[:, None] - v[None, :]) <= eps
    dummy_ok = v >= -eps
    col_of = col_of.copy()
    fixed_cols = set()
    DUMMY = -1

    for i in range(n):
        for j in np.flatnonzero(tight[i]):
            j = int(j)
            if j >= col_of[i]:
                break
            if j in fixed_cols:
                continue
            row_of = {int(c): r for r, c in enumerate(col_of)}
            c0 = int(col_of[i])
            start = row_of.get(j, DUMMY)
            blocked_rows = set(range(i + 1))
            blocked_cols = fixed_cols | {j}
            # BFS over rows for an alternating path from `start` to column c0
            parent = {start: None}
            came_by = {}
            queue = deque([start])
            found = None
            while queue and found is None:
                r = queue.popleft()
                cols = np.flatnonzero(dummy_ok if r == DUMMY else tight[r])
                for c in cols:
                    c = int(c)
                    if c in blocked_cols or c in came_by:
                        continue
                    came_by[c] = r
                    if c == c0:
                        found = c
                        break
                    holder = row_of.get(c, DUMMY)
                    if holder in blocked_rows or holder in parent:
                        continue
                    parent[holder] = c
                    queue.append(holder)
            if found is None:
                continue
            c = found
            while True:
                r = came_by[c]
                if r != DUMMY:
                    col_of[r] = c
                prev = parent[r]
                if prev is None:
                    break
                c = prev
            col_of[i] = j
            break
        fixed_cols.add(int(col_of[i]))
    return col_of


def hungarian_match(cost) -> Assignment:
    """Minimum-cost assignment of every row (GT) to a distinct column (query).

    Among optimal assignments the one whose pair list is lexicographically smallest
    is returned.
    """
    cost = _validate(cost)
    n, m = cost.shape
    if n == 0:
        return Assignment(pairs=[], unmatched_queries=list(range(m)), total_cost=0.0)
    col_of, u, v = _kuhn_munkres(cost)
    col_of = _lexicographic(cost, col_of, u, v)
    return _make_assignment(cost, col_of)


@functools.lru_cache(maxsize=None)
def _injections(n: int, m: int) -> np.ndarray:
    # itertools yields injections in lexicographic order, argmin keeps the first minimum
    perms = np.array(list(itertools.permutations(range(m), n)), dtype=np.int64)
    perms.setflags(write=False)
    return perms


def brute_force_match(cost) -> Assignment:
    """Exhaustive search over all injections; rows <= 8 and columns <= 10."""
    cost = _validate(cost)
    n, m = cost.shape
    if n > BRUTE_FORCE_MAX_ROWS or m > BRUTE_FORCE_MAX_COLS:
        raise ValueError(
            f"brute force limited to {BRUTE_FORCE_MAX_ROWS}x{BRUTE_FORCE_MAX_COLS}, got {n}x{m}"
        )
    if n == 0:
        return Assignment(pairs=[], unmatched_queries=list(range(m)), total_cost=0.0)
    perms = _injections(n, m)
    totals = np.zeros(len(perms))
    for i in range(n):
        totals = totals + cost[i, perms[:, i]]
    best = perms[int(np.argmin(totals))]
    return _make_assignment(cost, best)


def _focal_class_cost(logits, labels):
    prob = torch.sigmoid(logits)
    neg = (1 - FOCAL_ALPHA) * prob ** FOCAL_GAMMA * -torch.log(1 - prob + 1e-8)
    pos = FOCAL_ALPHA * (1 - prob) ** FOCAL_GAMMA * -torch.log(prob + 1e-8)
    return (pos - neg)[:, labels].T  # (G, K)


@torch.no_grad()
def match_cost(pred_boxes, pred_logits, gt_boxes, gt_labels, pred_deltas=None, ref_boxes=None,
               weights: DetLossWeights = DetLossWeights()) -> torch.Tensor:
    """``(G, K)`` matching cost: focal class cost, smooth-L1 on the regression
    parametrisation and ``1 - GIoU``, weighted like the detection loss.

    The regression term compares ``encode(gt | ref)`` with ``encode(pred | ref)``;
    without references the prediction itself is the reference.
    """
    if pred_boxes.shape[0] == 0:
        raise ValueError("match_cost needs at least one query")
    gt_boxes = torch.as_tensor(gt_boxes, dtype=pred_boxes.dtype)
    gt_labels = torch.as_tensor(gt_labels, dtype=torch.long)
    if ref_boxes is None:
        ref_boxes = pred_boxes
    if pred_deltas is None:
        pred_deltas = encode_boxes(pred_boxes, ref_boxes)
    cls = _focal_class_cost(pred_logits, gt_labels)
    target = encode_boxes(gt_boxes[:, None, :], ref_boxes[None, :, :])
    reg = smooth_l1(pred_deltas[None, :, :] - target, SMOOTH_L1_BETA).sum(-1)
    giou = pairwise_giou(gt_boxes, pred_boxes)
    return weights.alpha * cls + weights.beta * reg + weights.gamma * (1.0 - giou)


def match_layer(layer_out, gt_boxes, gt_labels, weights: DetLossWeights = DetLossWeights()) -> Assignment:
    """Hungarian assignment for one prediction head."""
    k = layer_out.boxes.shape[0]
    if len(gt_labels) == 0:
        return Assignment(pairs=[], unmatched_queries=list(range(k)), total_cost=0.0)
    cost = match_cost(layer_out.boxes.detach(), layer_out.class_logits.detach(), gt_boxes, gt_labels,
                      layer_out.deltas.detach(), layer_out.refined_from, weights)
    cost = cost.cpu().double().numpy()
    if not np.all(np.isfinite(cost)):
        cost = np.nan_to_num(cost, nan=1e6, posinf=1e6, neginf=-1e6)
    if math.isinf(float(np.abs(cost).max())):
        raise ValueError("non-finite matching cost")
    return hungarian_match(cost)
