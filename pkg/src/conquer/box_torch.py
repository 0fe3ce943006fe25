"""Differentiable box utilities in torch: regression coder and batched rotated (G)IoU.

Box tensors have a trailing dimension of 7: ``(cx, cy, cz, l, w, h, heading)``.
Regression deltas have a trailing dimension of 8:
``(dx / d, dy / d, dz / h, log l'/l, log w'/w, log h'/h, sin dtheta, cos dtheta)``
taken against a reference box whose BEV diagonal is ``d``.
"""
import math

import torch

BOX_DIM = 7
DELTA_DIM = 8


def wrap_angle(theta: torch.Tensor) -> torch.Tensor:
    return torch.remainder(theta + math.pi, 2.0 * math.pi) - math.pi


def encode_boxes(boxes: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Regression target of ``boxes`` relative to ``ref`` (broadcasting)."""
    diag = torch.sqrt(ref[..., 3] ** 2 + ref[..., 4] ** 2)
    dtheta = boxes[..., 6] - ref[..., 6]
    return torch.stack(
        [
            (boxes[..., 0] - ref[..., 0]) / diag,
            (boxes[..., 1] - ref[..., 1]) / diag,
            (boxes[..., 2] - ref[..., 2]) / ref[..., 5],
            torch.log(boxes[..., 3] / ref[..., 3]),
            torch.log(boxes[..., 4] / ref[..., 4]),
            torch.log(boxes[..., 5] / ref[..., 5]),
            torch.sin(dtheta),
            torch.cos(dtheta),
        ],
        dim=-1,
    )


def decode_boxes(deltas: torch.Tensor, ref: torch.Tensor, max_log_scale: float = 4.0) -> torch.Tensor:
    """Inverse of :func:`encode_boxes`; log-scales are clamped to keep sizes finite."""
    diag = torch.sqrt(ref[..., 3] ** 2 + ref[..., 4] ** 2)
    log_scale = deltas[..., 3:6].clamp(-max_log_scale, max_log_scale)
    sizes = ref[..., 3:6] * torch.exp(log_scale)
    heading = wrap_angle(ref[..., 6] + torch.atan2(deltas[..., 6], deltas[..., 7]))
    return torch.cat(
        [
            (ref[..., 0] + deltas[..., 0] * diag).unsqueeze(-1),
            (ref[..., 1] + deltas[..., 1] * diag).unsqueeze(-1),
            (ref[..., 2] + deltas[..., 2] * ref[..., 5]).unsqueeze(-1),
            sizes,
            heading.unsqueeze(-1),
        ],
        dim=-1,
    )


def bev_corners(boxes: torch.Tensor) -> torch.Tensor:
    """Counter-clockwise BEV corners, shape ``(..., 4, 2)``."""
    signs = boxes.new_tensor([[1.0, -1.0], [1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0]])
    half = 0.5 * boxes[..., None, 3:5] * signs
    c = torch.cos(boxes[..., 6])[..., None]
    s = torch.sin(boxes[..., 6])[..., None]
    x = half[..., 0] * c - half[..., 1] * s + boxes[..., None, 0]
    y = half[..., 0] * s + half[..., 1] * c + boxes[..., None, 1]
    return torch.stack([x, y], dim=-1)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _inside(points, poly, eps):
    # points (..., P, 2) against convex CCW poly (..., 4, 2)
    edges = torch.roll(poly, -1, dims=-2) - poly
    rel = points[..., :, None, :] - poly[..., None, :, :]
    side = _cross(edges[..., None, :, :].expand_as(rel), rel)
    return (side >= -eps).all(dim=-1)


def convex_intersection_area(poly_a: torch.Tensor, poly_b: torch.Tensor) -> torch.Tensor:
    """Intersection area of two batches of convex CCW quadrilaterals ``(..., 4, 2)``.

    Candidate vertices are the corners of each polygon inside the other plus all
    edge/edge crossings; the valid ones are sorted by angle about their centroid and
    fed to the shoelace formula. Differentiable almost everywhere in the corners.
    """
    scale = (poly_a.detach().abs().amax(dim=(-1, -2)) + poly_b.detach().abs().amax(dim=(-1, -2)) + 1.0)
    eps = (torch.finfo(poly_a.dtype).eps ** 0.5) * scale[..., None]

    in_a = _inside(poly_b, poly_a, eps[..., None])
    in_b = _inside(poly_a, poly_b, eps[..., None])

    p = poly_a[..., :, None, :]
    r = (torch.roll(poly_a, -1, dims=-2) - poly_a)[..., :, None, :]
    q = poly_b[..., None, :, :]
    s = (torch.roll(poly_b, -1, dims=-2) - poly_b)[..., None, :, :]
    r_b, s_b = torch.broadcast_tensors(r, s)
    denom = _cross(r_b, s_b)
    parallel = denom.abs() <= 1e-12 * scale[..., None, None] ** 2
    safe = torch.where(parallel, torch.ones_like(denom), denom)
    qp = q - p
    t = _cross(qp, s_b) / safe
    u = _cross(qp, r_b) / safe
    tol = torch.finfo(poly_a.dtype).eps ** 0.5
    valid_x = (~parallel) & (t >= -tol) & (t <= 1 + tol) & (u >= -tol) & (u <= 1 + tol)
    cross_pts = p + t[..., None] * r
    batch = cross_pts.shape[:-3]
    cross_pts = cross_pts.reshape(*batch, 16, 2)
    valid_x = valid_x.reshape(*batch, 16)

    pts = torch.cat([poly_a.expand(*batch, 4, 2), poly_b.expand(*batch, 4, 2), cross_pts], dim=-2)
    valid = torch.cat([in_b.expand(*batch, 4), in_a.expand(*batch, 4), valid_x], dim=-1)
    count = valid.sum(dim=-1)

    with torch.no_grad():
        weights = valid.to(pts.dtype)
        centroid = (pts * weights[..., None]).sum(-2) / weights.sum(-1, keepdim=True).clamp_min(1.0)
        rel = pts - centroid[..., None, :]
        angle = torch.atan2(rel[..., 1], rel[..., 0])
        angle = torch.where(valid, angle, torch.full_like(angle, 10.0))
        order = torch.argsort(angle, dim=-1, stable=True)
        # pad invalid slots with the first valid vertex; those edges add zero area
        slot = torch.arange(pts.shape[-2], device=pts.device)
        first = order[..., :1].expand_as(order)
        order = torch.where(slot < count[..., None], order, first)
    ordered = torch.gather(pts, -2, order[..., None].expand(*order.shape, 2))
    area = 0.5 * _cross(ordered, torch.roll(ordered, -1, dims=-2)).sum(-1)
    return torch.where(count >= 3, area.clamp_min(0.0), torch.zeros_like(area))


def _z_overlap(a, b):
    lo = torch.maximum(a[..., 2] - 0.5 * a[..., 5], b[..., 2] - 0.5 * b[..., 5])
    hi = torch.minimum(a[..., 2] + 0.5 * a[..., 5], b[..., 2] + 0.5 * b[..., 5])
    return (hi - lo).clamp_min(0.0)


def iou_giou(a: torch.Tensor, b: torch.Tensor, bev: bool = False):
    """Elementwise (broadcast) IoU and GIoU of rotated boxes.

    With ``bev=True`` the vertical axis is ignored (areas instead of volumes). The
    GIoU enclosing region is the axis-aligned hull of both boxes.
    """
    a, b = torch.broadcast_tensors(a, b)
    ca, cb = bev_corners(a), bev_corners(b)
    inter = convex_intersection_area(ca, cb)
    area_a = a[..., 3] * a[..., 4]
    area_b = b[..., 3] * b[..., 4]
    both = torch.cat([ca, cb], dim=-2)
    extent = both.amax(dim=-2) - both.amin(dim=-2)
    if bev:
        union = area_a + area_b - inter
        enclose = extent[..., 0] * extent[..., 1]
    else:
        inter = inter * _z_overlap(a, b)
        union = area_a * a[..., 5] + area_b * b[..., 5] - inter
        z_lo = torch.minimum(a[..., 2] - 0.5 * a[..., 5], b[..., 2] - 0.5 * b[..., 5])
        z_hi = torch.maximum(a[..., 2] + 0.5 * a[..., 5], b[..., 2] + 0.5 * b[..., 5])
        enclose = extent[..., 0] * extent[..., 1] * (z_hi - z_lo)
    iou = (inter / union).clamp(0.0, 1.0)
    giou = iou - (enclose - union) / enclose
    return iou, giou


def pairwise_giou(a: torch.Tensor, b: torch.Tensor, bev: bool = False) -> torch.Tensor:
    """``(N, M)`` GIoU matrix between ``a`` (N, 7) and ``b`` (M, 7)."""
    return iou_giou(a[:, None, :], b[None, :, :], bev=bev)[1]
