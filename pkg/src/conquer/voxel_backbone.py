"""Point cloud voxelization and a dense stride-8 BEV backbone."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

BEV_STRIDE = 8
POINT_FEATURES = 4  # offset-in-voxel x, y, z (in voxel units) and intensity
CHANNELS_PER_BIN = POINT_FEATURES + 1  # plus occupancy


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class VoxelGridConfig:
    voxel_size: tuple = (0.25, 0.25, 0.5)
    range: tuple = (-16.0, 16.0, -16.0, 16.0, 0.0, 4.0)
    max_points_per_voxel: int = 10

    def __post_init__(self):
        if any(s <= 0 for s in self.voxel_size):
            raise ConfigurationError(f"voxel sizes must be positive, got {self.voxel_size}")
        if self.max_points_per_voxel < 1:
            raise ConfigurationError("max_points_per_voxel must be >= 1")
        extent = np.array(self.range[1::2]) - np.array(self.range[0::2])
        dims = extent / np.array(self.voxel_size)
        if np.any(np.abs(dims - np.round(dims)) > 1e-6) or np.any(dims < 1):
            raise ConfigurationError(f"range {self.range} is not a whole number of voxels {self.voxel_size}")

    @property
    def grid_shape(self):
        """``(nz, ny, nx)``."""
        extent = np.array(self.range[1::2]) - np.array(self.range[0::2])
        nx, ny, nz = np.round(extent / np.array(self.voxel_size)).astype(int).tolist()
        return nz, ny, nx

    @property
    def bev_shape(self):
        _, ny, nx = self.grid_shape
        return ny // BEV_STRIDE, nx // BEV_STRIDE

    @property
    def bev_cell_size(self):
        return self.voxel_size[0] * BEV_STRIDE, self.voxel_size[1] * BEV_STRIDE

    def check_bev_divisible(self):
        _, ny, nx = self.grid_shape
        if ny % BEV_STRIDE or nx % BEV_STRIDE:
            raise ConfigurationError(
                f"grid {ny}x{nx} is not divisible by the BEV stride {BEV_STRIDE}"
            )


@dataclass
class VoxelSet:
    coords: np.ndarray  # (M, 3) int: iz, iy, ix
    features: np.ndarray  # (M, POINT_FEATURES) mean point features
    counts: np.ndarray  # (M,) points that contributed
    grid_shape: tuple

    def __len__(self):
        return len(self.coords)


def voxelize(points: np.ndarray, config: VoxelGridConfig) -> VoxelSet:
    """Bin points into voxels and average up to ``max_points_per_voxel`` of them per voxel.

    Points are taken first-come in their input order. Points outside the range are
    dropped; the upper range bound is treated as inclusive for the last voxel.
    """
    nz, ny, nx = config.grid_shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    lo = np.array(config.range[0::2])
    hi = np.array(config.range[1::2])
    size = np.array(config.voxel_size)
    keep = np.all((pts[:, :3] >= lo) & (pts[:, :3] <= hi), axis=1)
    pts = pts[keep]
    if len(pts) == 0:
        return VoxelSet(np.zeros((0, 3), dtype=np.int64), np.zeros((0, POINT_FEATURES)),
                        np.zeros(0, dtype=np.int64), (nz, ny, nx))
    scaled = (pts[:, :3] - lo) / size
    idx = np.floor(scaled).astype(np.int64)
    idx = np.minimum(idx, np.array([nx, ny, nz]) - 1)
    offset = scaled - idx - 0.5
    feats = np.column_stack([offset, pts[:, 3]])
    linear = (idx[:, 2] * ny + idx[:, 1]) * nx + idx[:, 0]
    order = np.argsort(linear, kind="stable")
    linear, feats = linear[order], feats[order]
    uniq, start, counts = np.unique(linear, return_index=True, return_counts=True)
    rank = np.arange(len(linear)) - np.repeat(start, counts)
    keep = rank < config.max_points_per_voxel
    group = np.repeat(np.arange(len(uniq)), counts)[keep]
    used = np.minimum(counts, config.max_points_per_voxel)
    sums = np.zeros((len(uniq), POINT_FEATURES))
    np.add.at(sums, group, feats[keep])
    means = sums / used[:, None]
    iz, rem = np.divmod(uniq, ny * nx)
    iy, ix = np.divmod(rem, nx)
    return VoxelSet(np.column_stack([iz, iy, ix]), means, used, (nz, ny, nx))


def voxels_to_dense(voxels: VoxelSet) -> np.ndarray:
    """Collapse z by stacking per-bin channels: returns ``(nz * 5, ny, nx)``."""
    nz, ny, nx = voxels.grid_shape
    dense = np.zeros((nz, CHANNELS_PER_BIN, ny, nx))
    if len(voxels):
        iz, iy, ix = voxels.coords.T
        dense[iz, 0, iy, ix] = 1.0
        for c in range(POINT_FEATURES):
            dense[iz, c + 1, iy, ix] = voxels.features[:, c]
    return dense.reshape(nz * CHANNELS_PER_BIN, ny, nx)


@dataclass
class BEVFeatureMap:
    features: torch.Tensor  # (B, C, H, W); row index runs along +y, column along +x
    origin: tuple  # (x_min, y_min) in meters
    cell_size: tuple  # (dx, dy) meters per BEV cell
    stride: int = BEV_STRIDE

    @property
    def height(self):
        return self.features.shape[-2]

    @property
    def width(self):
        return self.features.shape[-1]

    @property
    def channels(self):
        return self.features.shape[1]

    def with_features(self, features: torch.Tensor) -> "BEVFeatureMap":
        return BEVFeatureMap(features, self.origin, self.cell_size, self.stride)

    def cell_centers(self) -> torch.Tensor:
        """World ``(x, y)`` of every cell in row-major order, shape ``(H * W, 2)``."""
        f = self.features
        xs = self.origin[0] + (torch.arange(self.width, dtype=f.dtype) + 0.5) * self.cell_size[0]
        ys = self.origin[1] + (torch.arange(self.height, dtype=f.dtype) + 0.5) * self.cell_size[1]
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)


def _conv(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.ReLU(inplace=True))


class DenseBEVBackbone(nn.Module):
    """Three stride-2 conv stages on the z-collapsed grid plus a 1x1 lateral projection."""

    def __init__(self, config: VoxelGridConfig, d_model: int = 64, widths=(32, 64, 64)):
        super().__init__()
        config.check_bev_divisible()
        self.config = config
        nz = config.grid_shape[0]
        c1, c2, c3 = widths
        self.stages = nn.Sequential(
            _conv(nz * CHANNELS_PER_BIN, c1, 2), _conv(c1, c1, 1),
            _conv(c1, c2, 2), _conv(c2, c2, 1),
            _conv(c2, c3, 2), _conv(c3, c3, 1),
        )
        self.lateral = nn.Conv2d(c3, d_model, 1)

    def forward(self, dense: torch.Tensor) -> BEVFeatureMap:
        if dense.dim() == 3:
            dense = dense.unsqueeze(0)
        features = self.lateral(self.stages(dense))
        return BEVFeatureMap(
            features,
            origin=(self.config.range[0], self.config.range[2]),
            cell_size=self.config.bev_cell_size,
        )


def backbone_forward(voxels, backbone: DenseBEVBackbone) -> BEVFeatureMap:
    """Run ``backbone`` on one :class:`VoxelSet` or a list of them (batched)."""
    if isinstance(voxels, VoxelSet):
        voxels = [voxels]
    param = next(backbone.parameters())
    for v in voxels:
        if tuple(v.grid_shape) != tuple(backbone.config.grid_shape):
            raise ConfigurationError(
                f"voxel grid {v.grid_shape} does not match backbone grid {backbone.config.grid_shape}"
            )
    dense = np.stack([voxels_to_dense(v) for v in voxels])
    return backbone(torch.as_tensor(dense, dtype=param.dtype, device=param.device))
