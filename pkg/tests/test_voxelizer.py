import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from siammo.voxelizer import (CAR_VOXELS, DESK_VOXELS, LARGE_VOXELS, PEDESTRIAN_VOXELS, VoxelConfig,
                              VoxelIndex, concat_voxel_features, decode_keys, encode_keys, voxelize,
                              voxelize_batch, voxelize_with_counts)


def test_mean_of_two_points():
    v = voxelize([[0.01, 0.02, 0.03], [0.02, 0.04, 0.09]], CAR_VOXELS)
    assert len(v) == 1
    assert np.allclose(v.feats.data[0], [0.015, 0.03, 0.06], atol=1e-15)


def test_single_point():
    p = np.array([[1.234, -0.5, 0.3]])
    assert np.array_equal(voxelize(p, DESK_VOXELS).feats.data, p)


def test_thousand_points_one_voxel():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.0, 0.15, (1000, 3)) * 0.999 + 0.0001
    v = voxelize(p, DESK_VOXELS)
    assert len(v) == 1
    direct = np.array([sum(p[:, k].tolist()) / 1000 for k in range(3)])
    assert np.max(np.abs(v.feats.data[0] - direct)) < 1e-12


def test_empty():
    v = voxelize(np.zeros((0, 3)), DESK_VOXELS)
    assert len(v) == 0 and v.feats.shape == (0, 3)


def test_grid_shapes_padded():
    assert DESK_VOXELS.grid_shape == (64, 64, 16)
    assert CAR_VOXELS.grid_shape == (128, 128, 24)
    assert PEDESTRIAN_VOXELS.grid_shape == (128, 128, 24)
    assert LARGE_VOXELS.grid_shape == (128, 128, 24)


def test_points_outside_ignored():
    v = voxelize([[100.0, 0, 0], [0.0, 0, 0]], DESK_VOXELS)
    assert len(v) == 1


@given(st.integers(0, 10_000), st.integers(1, 300))
@settings(max_examples=50)
def test_conservation_and_permutation(seed, n):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1.0, 1.0, (n, 3))
    v, counts = voxelize_with_counts([p], DESK_VOXELS)
    assert np.max(np.abs((v.feats.data * counts[:, None]).sum(0) - p.sum(0))) < 1e-9
    assert counts.sum() == n
    assert len(v) <= min(n, int(np.prod(DESK_VOXELS.grid_shape)))
    w = voxelize(p[rng.permutation(n)], DESK_VOXELS)
    assert np.array_equal(v.feats.data, w.feats.data)
    assert np.array_equal(v.coords, w.coords)


def test_batch_keeps_clouds_apart():
    p = np.array([[0.1, 0.1, 0.1]])
    v = voxelize_batch([p, p + 0.001], DESK_VOXELS)
    assert len(v) == 2
    assert v.index.batch.tolist() == [0, 1]


def test_keys_round_trip():
    rng = np.random.default_rng(1)
    grid = (8, 16, 24)
    c = rng.integers(0, grid, (50, 3))
    b = rng.integers(0, 3, 50)
    cc, bb = decode_keys(encode_keys(c, b, grid), grid)
    assert np.array_equal(cc, c) and np.array_equal(bb, b)


@pytest.mark.parametrize("direct", [True, False])
def test_index_lookup(monkeypatch, direct):
    import siammo.voxelizer as vx
    if not direct:
        monkeypatch.setattr(vx, "DIRECT_TABLE_LIMIT", 0)
    v = voxelize(np.random.default_rng(2).uniform(-4, 4, (200, 3)) * [1, 1, 0.25], DESK_VOXELS)
    idx = v.index
    assert np.array_equal(idx.find(idx.keys), np.arange(len(idx)))
    missing = np.setdiff1d(np.arange(5000), idx.keys)[:20]
    assert np.all(idx.find(missing) == -1)
    ix, iy, iz = idx.coords[3]
    assert idx.index_of(ix, iy, iz) == 3


def test_index_rejects_unsorted():
    with pytest.raises(ValueError):
        VoxelIndex([[1, 0, 0], [0, 0, 0]], [0, 0], (8, 8, 8), 1)


def test_concat_union():
    a = voxelize([[0.1, 0.1, 0.1]], DESK_VOXELS)
    b = voxelize([[0.1, 0.1, 0.1], [1.0, 1.0, 0.5]], DESK_VOXELS)
    c = concat_voxel_features(a, b)
    assert len(c) == 2 and c.channels == 6
    assert np.array_equal(c.feats.data[:, :3].sum(0), a.feats.data.sum(0))


def test_config_extent():
    cfg = VoxelConfig(((-1, 1), (-1, 1), (-1, 1)), (0.5, 0.5, 0.5))
    assert cfg.grid_shape == (8, 8, 8)
