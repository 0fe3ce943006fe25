import numpy as np
import pytest
import torch

from conquer.scene_synth import SceneConfig, generate_scene
from conquer.voxel_backbone import (
    ConfigurationError, DenseBEVBackbone, VoxelGridConfig, backbone_forward, voxelize, voxels_to_dense,
)

SMALL = VoxelGridConfig(voxel_size=(0.25, 0.25, 0.5), range=(-16.0, 16.0, -16.0, 16.0, 0.0, 4.0))


def test_single_point_voxel():
    v = voxelize(np.array([[0.3, -0.1, 1.2, 0.5]]), SMALL)
    assert len(v) == 1
    assert v.coords.tolist() == [[2, 63, 65]]  # floor((z, y, x) - lo) / size


def test_out_of_range_dropped():
    v = voxelize(np.array([[100.0, 0, 0, 1], [0, 0, -5, 1]]), SMALL)
    assert len(v) == 0 and voxels_to_dense(v).sum() == 0


def test_mean_intensity():
    v = voxelize(np.array([[0.01, 0.01, 0.1, 0.2], [0.02, 0.02, 0.1, 0.6]]), SMALL)
    assert len(v) == 1 and abs(v.features[0, 3] - 0.4) < 1e-12


def test_max_points_first_come():
    cfg = VoxelGridConfig(max_points_per_voxel=2)
    pts = np.array([[0.01, 0.01, 0.1, 0.2], [0.02, 0.02, 0.1, 0.4], [0.03, 0.03, 0.1, 1.0]])
    v = voxelize(pts, cfg)
    assert v.counts.tolist() == [2] and abs(v.features[0, 3] - 0.3) < 1e-12


def test_grid_config_errors():
    with pytest.raises(ConfigurationError):
        VoxelGridConfig(voxel_size=(0.3, 0.25, 0.5))
    with pytest.raises(ConfigurationError):
        DenseBEVBackbone(VoxelGridConfig(range=(-15.0, 16.0, -16.0, 16.0, 0.0, 4.0)))


def test_backbone_shape_and_zero_determinism():
    torch.manual_seed(0)
    bb = DenseBEVBackbone(SMALL).double()
    empty = voxelize(np.zeros((0, 4)), SMALL)
    a = backbone_forward(empty, bb).features
    b = backbone_forward(empty, bb).features
    assert a.shape == (1, 64, 16, 16) and torch.equal(a, b)
    assert torch.isfinite(a).all()


def test_grid_mismatch_rejected():
    bb = DenseBEVBackbone(SMALL)
    other = voxelize(np.zeros((0, 4)), VoxelGridConfig(voxel_size=(0.5, 0.5, 0.5)))
    with pytest.raises(ConfigurationError):
        backbone_forward(other, bb)


def test_translation_equivariance_interior():
    torch.manual_seed(0)
    bb = DenseBEVBackbone(SMALL).double()
    pts = generate_scene(SceneConfig(), 3).points
    pts = pts[np.abs(pts[:, 0]) < 10]
    shifted = pts.copy()
    shifted[:, 0] += 8 * 0.25
    f0 = backbone_forward(voxelize(pts, SMALL), bb).features[0]
    f1 = backbone_forward(voxelize(shifted, SMALL), bb).features[0]
    # columns within the receptive field of the zero-padded x border are excluded
    assert torch.allclose(f1[:, :, 4:-3], f0[:, :, 3:-4], atol=1e-10)
    assert not torch.allclose(f1[:, :, 1:], f0[:, :, :-1], atol=1e-10)


def test_backbone_gradcheck_16x16():
    torch.manual_seed(0)
    cfg = VoxelGridConfig(voxel_size=(1.0, 1.0, 2.0), range=(-64.0, 64.0, -64.0, 64.0, 0.0, 4.0))
    bb = DenseBEVBackbone(cfg, d_model=4, widths=(2, 2, 2)).double()
    scene = generate_scene(SceneConfig(range=cfg.range, objects_per_class=(2, 2)), 0)
    dense = torch.tensor(voxels_to_dense(voxelize(scene.points, cfg))).unsqueeze(0)
    names = [n for n, _ in bb.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for p in bb.parameters())

    def f(*ps):
        out = torch.func.functional_call(bb, dict(zip(names, ps)), (dense,))
        assert out.features.shape[-2:] == (16, 16)
        return (out.features ** 2).mean()

    assert torch.autograd.gradcheck(f, params, eps=1e-6, atol=1e-7, rtol=1e-3)
