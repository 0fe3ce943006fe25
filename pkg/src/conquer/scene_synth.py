"""Seeded synthetic driving-like scenes: non-overlapping oriented boxes sampled as surface points."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import NUM_CLASSES, Box3D, arrays_to_boxes, bev_intersection_area, box_corners_bev, boxes_to_arrays

MAX_PLACEMENT_ATTEMPTS = 10_000

# dtype of the GT block in scene files; field names follow Box3D exactly
GT_DTYPE = np.dtype(
    [("cx", "f8"), ("cy", "f8"), ("cz", "f8"), ("l", "f8"), ("w", "f8"), ("h", "f8"),
     ("heading", "f8"), ("class_id", "i8")]
)


class PlacementError(RuntimeError):
    """Rejection sampling could not place the required number of objects."""


@dataclass(frozen=True)
class SceneConfig:
    range: tuple = (-16.0, 16.0, -16.0, 16.0, 0.0, 4.0)
    objects_per_class: tuple = ((2, 5), (1, 4), (1, 3))
    points_per_object: tuple = (40, 160)
    clutter_points: int = 800
    size_mean: tuple = ((4.5, 2.0, 1.6), (0.8, 0.8, 1.7), (1.8, 0.7, 1.6))
    size_std: tuple = ((0.3, 0.15, 0.1), (0.1, 0.1, 0.1), (0.15, 0.08, 0.1))
    intensity_mean: tuple = (0.7, 0.35, 0.5)

    def __post_init__(self):
        x0, x1, y0, y1, z0, z1 = self.range
        if not (x0 < x1 and y0 < y1 and z0 < z1):
            raise ValueError(f"scene range must be ordered, got {self.range}")
        counts = self.objects_per_class
        if isinstance(counts[0], (int, np.integer)):
            counts = (tuple(counts),) * NUM_CLASSES
            object.__setattr__(self, "objects_per_class", counts)
        if len(counts) != NUM_CLASSES:
            raise ValueError("objects_per_class needs one (min, max) pair per class")
        for lo, hi in counts:
            if lo < 0 or hi < lo:
                raise ValueError(f"invalid object count range ({lo}, {hi})")
        lo, hi = self.points_per_object
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid points_per_object ({lo}, {hi})")
        if self.clutter_points < 0:
            raise ValueError("clutter_points must be >= 0")


@dataclass
class Scene:
    points: np.ndarray  # (N, 4): x, y, z, intensity
    gts: list = field(default_factory=list)
    seed: int = 0

    @property
    def gt_arrays(self):
        return boxes_to_arrays(self.gts)


def _sample_size(config: SceneConfig, cls: int, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(config.size_mean[cls])
    std = np.asarray(config.size_std[cls])
    return np.clip(mean + std * rng.standard_normal(3), 0.5 * mean, 1.5 * mean)


def _fits(box: Box3D, placed, scene_range) -> bool:
    x0, x1, y0, y1, _, _ = scene_range
    corners = box_corners_bev(box)
    if corners[:, 0].min() < x0 or corners[:, 0].max() > x1:
        return False
    if corners[:, 1].min() < y0 or corners[:, 1].max() > y1:
        return False
    return all(bev_intersection_area(box, other) <= 0.0 for other in placed)


def _place(size, cls, placed, config, rng):
    x0, x1, y0, y1, z0, _ = config.range
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        box = Box3D(
            rng.uniform(x0, x1), rng.uniform(y0, y1), z0 + 0.5 * size[2],
            *size.tolist(), heading=rng.uniform(-math.pi, math.pi), class_id=cls,
        )
        if _fits(box, placed, config.range):
            return box
    return None


def sample_surface_points(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform over the six faces of ``box`` (area weighted), world frame, shape (n, 3)."""
    l, w, h = box.l, box.w, box.h
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([l, w, h])
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    half = 0.5 * np.array([l, w, h])
    uv[np.arange(n), axis] = sign * half[axis]
    c, s = math.cos(box.heading), math.sin(box.heading)
    x = box.cx + uv[:, 0] * c - uv[:, 1] * s
    y = box.cy + uv[:, 0] * s + uv[:, 1] * c
    z = box.cz + uv[:, 2]
    return np.stack([x, y, z], axis=1)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Sample a scene as a pure function of ``(config, seed)``."""
    rng = np.random.default_rng(seed)
    x0, x1, y0, y1, z0, z1 = config.range
    placed = []
    for cls in range(NUM_CLASSES):
        lo, hi = config.objects_per_class[cls]
        n_obj = int(rng.integers(lo, hi + 1))
        for k in range(n_obj):
            box = _place(_sample_size(config, cls, rng), cls, placed, config, rng)
            if box is None:
                raise PlacementError(
                    f"could not place object {k + 1}/{n_obj} of class {cls} "
                    f"in {MAX_PLACEMENT_ATTEMPTS} attempts (seed={seed})"
                )
            placed.append(box)

    blocks = []
    for box in placed:
        n = int(rng.integers(config.points_per_object[0], config.points_per_object[1] + 1))
        xyz = sample_surface_points(box, n, rng)
        intensity = np.clip(config.intensity_mean[box.class_id] + 0.05 * rng.standard_normal(n), 0.0, 1.0)
        blocks.append(np.column_stack([xyz, intensity]))
    n_clutter = config.clutter_points
    clutter = np.column_stack([
        rng.uniform(x0, x1, n_clutter),
        rng.uniform(y0, y1, n_clutter),
        rng.uniform(z0, min(z0 + 0.3, z1), n_clutter),
        rng.uniform(0.0, 0.3, n_clutter),
    ])
    blocks.append(clutter)
    points = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, 4))
    # surface points can sit a hair outside the range through rounding
    points[:, 0] = np.clip(points[:, 0], x0, x1)
    points[:, 1] = np.clip(points[:, 1], y0, y1)
    points[:, 2] = np.clip(points[:, 2], z0, z1)
    return Scene(points=points, gts=placed, seed=int(seed))


def extract_object_bank(scenes, margin: float = 0.01):
    """Collect ``(points, box)`` pairs for every GT of ``scenes`` (points in the world frame)."""
    from .geometry import points_in_box

    bank = []
    for scene in scenes:
        for box in scene.gts:
            mask = points_in_box(scene.points, box, margin=margin)
            bank.append((scene.points[mask].copy(), box))
    return bank


def paste_augment(scene: Scene, bank, n: int, rng: np.random.Generator, scene_range=None,
                  attempts: int = 50) -> Scene:
    """Paste up to ``n`` bank objects at random collision-free poses.

    Each pasted object keeps its size and class; its points are carried over rigidly
    and any scene points inside the new footprint are removed. Objects that cannot
    be placed within ``attempts`` draws are skipped.
    """
    if n <= 0:
        return scene
    if len(bank) == 0:
        raise ValueError("paste_augment needs a non-empty object bank when n > 0")
    if scene_range is None:
        scene_range = SceneConfig().range
    x0, x1, y0, y1, _, _ = scene_range
    gts = list(scene.gts)
    points = scene.points
    for _ in range(n):
        src_points, src = bank[int(rng.integers(len(bank)))]
        for _ in range(attempts):
            new = src.replace(cx=rng.uniform(x0, x1), cy=rng.uniform(y0, y1),
                              heading=rng.uniform(-math.pi, math.pi))
            if _fits(new, gts, scene_range):
                break
        else:
            continue
        local = src_points[:, :2] - np.array([src.cx, src.cy])
        dtheta = new.heading - src.heading
        c, s = math.cos(dtheta), math.sin(dtheta)
        moved = src_points.copy()
        moved[:, 0] = new.cx + local[:, 0] * c - local[:, 1] * s
        moved[:, 1] = new.cy + local[:, 0] * s + local[:, 1] * c
        moved[:, 0] = np.clip(moved[:, 0], x0, x1)
        moved[:, 1] = np.clip(moved[:, 1], y0, y1)
        footprint = _in_footprint(points, new)
        points = np.concatenate([points[~footprint], moved], axis=0)
        gts.append(new)
    return Scene(points=points, gts=gts, seed=scene.seed)


def _in_footprint(points, box: Box3D) -> np.ndarray:
    local = points[:, :2] - np.array([box.cx, box.cy])
    c, s = math.cos(box.heading), math.sin(box.heading)
    u = local[:, 0] * c + local[:, 1] * s
    v = -local[:, 0] * s + local[:, 1] * c
    return (np.abs(u) <= 0.5 * box.l) & (np.abs(v) <= 0.5 * box.w)


def save_scene(scene: Scene, path) -> Path:
    """Write ``scene`` as an ``.npz`` record with ``points``, ``gts`` and ``seed`` arrays."""
    path = Path(path)
    params, labels = boxes_to_arrays(scene.gts)
    gts = np.zeros(len(scene.gts), dtype=GT_DTYPE)
    for i, name in enumerate(("cx", "cy", "cz", "l", "w", "h", "heading")):
        gts[name] = params[:, i] if len(params) else []
    gts["class_id"] = labels
    with open(path, "wb") as fh:
        np.savez(fh, points=np.asarray(scene.points, dtype=np.float64), gts=gts,
                 seed=np.array(scene.seed, dtype=np.int64))
    return path


def load_scene(path) -> Scene:
    with np.load(path, allow_pickle=False) as data:
        gts = data["gts"]
        params = np.column_stack([gts[name] for name in ("cx", "cy", "cz", "l", "w", "h", "heading")]) \
            if len(gts) else np.zeros((0, 7))
        boxes = arrays_to_boxes(params, gts["class_id"])
        return Scene(points=data["points"].copy(), gts=boxes, seed=int(data["seed"]))
