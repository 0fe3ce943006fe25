"""Oriented 3D boxes and the scalar geometry used by NMS, evaluation and scene synthesis.

Boxes are parametrised as ``(cx, cy, cz, l, w, h, heading)`` where ``l`` runs along
the heading direction and ``heading`` is the yaw about +z. Everything here works on
plain numpy; the differentiable batched counterparts live in :mod:`conquer.box_torch`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NUM_CLASSES = 3
CLASS_NAMES = ("vehicle", "pedestrian", "cyclist")


def normalize_heading(theta):
    """Wrap angles to ``[-pi, pi)``. Works on scalars and arrays."""
    theta = np.asarray(theta, dtype=np.float64)
    inside = (theta >= -np.pi) & (theta < np.pi)
    # already-wrapped values pass through untouched so wrapping is idempotent
    wrapped = np.where(inside, theta, np.mod(theta + np.pi, 2.0 * np.pi) - np.pi)
    wrapped = np.where(wrapped >= np.pi, wrapped - 2.0 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    heading: float = 0.0
    class_id: int = 0

    def __post_init__(self):
        for name in ("cx", "cy", "cz", "l", "w", "h", "heading"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"Box3D.{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if min(self.l, self.w, self.h) <= 0:
            raise ValueError(f"Box3D sizes must be positive, got l={self.l} w={self.w} h={self.h}")
        object.__setattr__(self, "heading", normalize_heading(self.heading))
        if not 0 <= int(self.class_id) < NUM_CLASSES:
            raise ValueError(f"class_id must be in [0, {NUM_CLASSES}), got {self.class_id}")
        object.__setattr__(self, "class_id", int(self.class_id))

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    @property
    def z_min(self) -> float:
        return self.cz - 0.5 * self.h

    @property
    def z_max(self) -> float:
        return self.cz + 0.5 * self.h

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.heading])

    @classmethod
    def from_array(cls, values, class_id: int = 0) -> "Box3D":
        values = np.asarray(values, dtype=np.float64)
        return cls(*values[:7].tolist(), class_id=class_id)

    def replace(self, **changes) -> "Box3D":
        params = {k: getattr(self, k) for k in ("cx", "cy", "cz", "l", "w", "h", "heading", "class_id")}
        params.update(changes)
        return Box3D(**params)


def boxes_to_arrays(boxes):
    """Stack a list of :class:`Box3D` into a ``(N, 7)`` float array and ``(N,)`` labels."""
    if len(boxes) == 0:
        return np.zeros((0, 7)), np.zeros((0,), dtype=np.int64)
    params = np.stack([b.to_array() for b in boxes])
    labels = np.array([b.class_id for b in boxes], dtype=np.int64)
    return params, labels


def arrays_to_boxes(params, labels):
    return [Box3D.from_array(p, class_id=int(c)) for p, c in zip(params, labels)]


@dataclass(frozen=True)
class BoxNoiseSpec:
    box_noise_ratio: float = 0.4
    label_noise_ratio: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.box_noise_ratio < 1.0:
            raise ValueError(f"box_noise_ratio must be in [0, 1), got {self.box_noise_ratio}")
        if not 0.0 <= self.label_noise_ratio <= 1.0:
            raise ValueError(f"label_noise_ratio must be in [0, 1], got {self.label_noise_ratio}")


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def box_corners_bev(box: Box3D) -> np.ndarray:
    """Four BEV corners of ``box`` in counter-clockwise order, shape ``(4, 2)``."""
    half = np.array(
        [[0.5 * box.l, -0.5 * box.w],
         [0.5 * box.l, 0.5 * box.w],
         [-0.5 * box.l, 0.5 * box.w],
         [-0.5 * box.l, -0.5 * box.w]]
    )
    return half @ _rotation(box.heading).T + np.array([box.cx, box.cy])


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip(subject, a, b):
    # keep the part of `subject` left of the directed edge a->b
    out = []
    n = len(subject)
    if n == 0:
        return out
    ex, ey = b[0] - a[0], b[1] - a[1]

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    prev = subject[-1]
    prev_side = side(prev)
    for cur in subject:
        cur_side = side(cur)
        if cur_side >= 0:
            if prev_side < 0:
                t = prev_side / (prev_side - cur_side)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            out.append(cur)
        elif prev_side >= 0:
            t = prev_side / (prev_side - cur_side)
            out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
        prev, prev_side = cur, cur_side
    return out


def convex_intersection(poly_a: np.ndarray, poly_b: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of convex CCW polygon ``poly_a`` against convex CCW ``poly_b``."""
    subject = [tuple(p) for p in poly_a]
    for i in range(len(poly_b)):
        subject = _clip(subject, poly_b[i], poly_b[(i + 1) % len(poly_b)])
        if not subject:
            break
    return np.asarray(subject, dtype=np.float64).reshape(-1, 2)


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    # cheap rejection on circumscribed circles
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    area = polygon_area(convex_intersection(box_corners_bev(a), box_corners_bev(b)))
    return max(area, 0.0)


def bev_iou(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection_area(a, b)
    union = a.l * a.w + b.l * b.w - inter
    return float(np.clip(inter / union, 0.0, 1.0)) if union > 0 else 0.0


def _overlap_1d(lo_a, hi_a, lo_b, hi_b):
    return max(0.0, min(hi_a, hi_b) - max(lo_a, lo_b))


def intersection_volume(a: Box3D, b: Box3D) -> float:
    dz = _overlap_1d(a.z_min, a.z_max, b.z_min, b.z_max)
    if dz <= 0.0:
        return 0.0
    return bev_intersection_area(a, b) * dz


def iou3d(a: Box3D, b: Box3D) -> float:
    """Rotated 3D IoU: BEV polygon overlap times vertical overlap over the union volume."""
    # order the pair so that iou3d(a, b) == iou3d(b, a) bit for bit
    if (a.to_array().tolist(), a.class_id) > (b.to_array().tolist(), b.class_id):
        a, b = b, a
    inter = intersection_volume(a, b)
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return float(np.clip(inter / union, 0.0, 1.0))


def enclosing_aabb(a: Box3D, b: Box3D) -> np.ndarray:
    """Smallest axis-aligned box containing both rotated boxes: ``[x0, y0, z0, x1, y1, z1]``."""
    corners = np.concatenate([box_corners_bev(a), box_corners_bev(b)])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    return np.array([lo[0], lo[1], min(a.z_min, b.z_min), hi[0], hi[1], max(a.z_max, b.z_max)])


def giou3d(a: Box3D, b: Box3D) -> float:
    """Generalized 3D IoU with an axis-aligned enclosing volume."""
    if (a.to_array().tolist(), a.class_id) > (b.to_array().tolist(), b.class_id):
        a, b = b, a
    inter = intersection_volume(a, b)
    union = a.volume + b.volume - inter
    iou = float(np.clip(inter / union, 0.0, 1.0))
    enc = enclosing_aabb(a, b)
    enc_vol = float(np.prod(enc[3:] - enc[:3]))
    return iou - (enc_vol - union) / enc_vol


def points_in_box(points: np.ndarray, box: Box3D, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of ``points[:, :3]`` inside ``box`` inflated by ``margin`` on every side."""
    pts = np.asarray(points)[:, :3]
    local = pts[:, :2] - np.array([box.cx, box.cy])
    c, s = math.cos(box.heading), math.sin(box.heading)
    u = local[:, 0] * c + local[:, 1] * s
    v = -local[:, 0] * s + local[:, 1] * c
    return (
        (np.abs(u) <= 0.5 * box.l + margin)
        & (np.abs(v) <= 0.5 * box.w + margin)
        & (np.abs(pts[:, 2] - box.cz) <= 0.5 * box.h + margin)
    )


def apply_box_noise(box: Box3D, spec: BoxNoiseSpec, rng: np.random.Generator) -> Box3D:
    """Perturb one box: centre, size, heading and (possibly) class label.

    Centre moves uniformly within ``ratio * size / 2`` per axis, each size dimension is
    scaled by a factor in ``[1 - ratio, 1 + ratio]``, heading moves within
    ``ratio * pi / 2``. With probability ``label_noise_ratio`` the label is resampled from
    the other classes. The draw count is the same for every call so seeded streams stay
    aligned regardless of the ratios.
    """
    ratio = spec.box_noise_ratio
    size = np.array([box.l, box.w, box.h])
    shift = rng.uniform(-1.0, 1.0, size=3) * ratio * 0.5 * size
    scale = 1.0 + rng.uniform(-1.0, 1.0, size=3) * ratio
    dtheta = rng.uniform(-1.0, 1.0) * ratio * 0.5 * math.pi
    flip = rng.uniform() < spec.label_noise_ratio
    other = int(rng.integers(0, NUM_CLASSES - 1))
    class_id = box.class_id
    if flip:
        class_id = other if other < box.class_id else other + 1
    if ratio == 0.0:
        return Box3D(box.cx, box.cy, box.cz, box.l, box.w, box.h, box.heading, class_id)
    return Box3D(
        box.cx + shift[0],
        box.cy + shift[1],
        box.cz + shift[2],
        *(size * scale).tolist(),
        heading=box.heading + dtheta,
        class_id=class_id,
    )
