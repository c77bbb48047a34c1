import numpy as np
import pytest

from siammo.errors import ShapeMismatch
from siammo.geometry import to_canonical
from siammo.network import (ModelConfig, bfe_head, count_parameters, encoder_forward, init_params,
                            model_config_from_dict, model_config_to_dict, model_forward, predict,
                            sfe_forward, stfa_forward, with_architecture)
from siammo.pointcloud_io import SynthConfig, crop_range, synth_sequence
from siammo.tensor import AdamW, Tensor
from siammo.trainer import TrainConfig, batch_loss, make_sample, train_step
from siammo.voxelizer import CAR_VOXELS, voxelize_batch

CFG = ModelConfig()


@pytest.fixture(scope="module")
def pair():
    seq = synth_sequence(SynthConfig(n_frames=2, seed=3))
    ref = seq.gt_boxes[0]
    r = CFG.voxels.ranges
    return (crop_range(to_canonical(seq.frames[0], ref), r),
            crop_range(to_canonical(seq.frames[1], ref), r), np.array(ref.size))


@pytest.fixture(scope="module")
def params():
    return init_params(CFG)


def test_siamese_identical_inputs_share_pyramids(pair, params):
    v = voxelize_batch([pair[0]], CFG.voxels)
    fp, fs = sfe_forward(v, v, params, CFG)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(fp, fs))


def test_dual_branches_differ(pair):
    cfg = with_architecture(CFG, "dual")
    p = init_params(cfg)
    v = voxelize_batch([pair[0]], cfg.voxels)
    fp, fs = sfe_forward(v, v, p, cfg)
    assert not np.array_equal(fp[0].data, fs[0].data)


def test_single_returns_one_pyramid(pair):
    cfg = with_architecture(CFG, "single")
    v = voxelize_batch([pair[0]], cfg.voxels)
    f, none = sfe_forward(v, v, init_params(cfg), cfg)
    assert none is None and len(f) == 3


def test_pyramid_shapes_car_grid():
    cfg = ModelConfig(voxels=CAR_VOXELS)
    p = init_params(cfg)
    v = voxelize_batch([np.random.default_rng(0).uniform(-3, 3, (300, 3))], cfg.voxels)
    f = encoder_forward(v, p, "enc", cfg)
    assert [t.shape[2:] for t in f] == [(16, 16), (8, 8), (4, 4)]
    assert [t.shape[1] for t in f] == list(cfg.dbfe_widths)


def test_zero_pyramids_zero_biases(params):
    zeroed = {k: (Tensor(np.zeros_like(v.data)) if k.startswith("stfa") and k.endswith(".b") else v)
              for k, v in params.items()}
    f = [Tensor(np.zeros((1, c, 16 >> i, 16 >> i))) for i, c in enumerate(CFG.dbfe_widths)]
    assert not stfa_forward(f, f, zeroed, CFG).data.any()


def test_bfe_zero_size_zero_bias(params):
    p = dict(params)
    for k in ("bfe.fc0.b", "bfe.fc1.b"):
        p[k] = Tensor(np.zeros_like(params[k].data))
    m = Tensor(np.random.default_rng(1).normal(size=(2, CFG.motion_widths[2])))
    on = bfe_head(m, np.zeros((2, 3)), p, CFG)[0].data
    off = bfe_head(m, np.zeros((2, 3)), p, ModelConfig(use_bfe=False))[0].data
    assert np.array_equal(on, off)


def test_bfe_size_matters(params):
    m = Tensor(np.random.default_rng(1).normal(size=(1, CFG.motion_widths[2])))
    a = bfe_head(m, [3.9, 1.6, 1.5], params, CFG)[0].data
    b = bfe_head(m, [7.8, 3.2, 3.0], params, CFG)[0].data
    assert not np.array_equal(a, b)


def test_bfe_batch_mismatch(params):
    with pytest.raises(ShapeMismatch):
        bfe_head(Tensor(np.zeros((2, CFG.motion_widths[2]))), np.zeros((3, 3)), params, CFG)


def test_deterministic(pair, params):
    a = model_forward([pair[0]], [pair[1]], [pair[2]], params, CFG)
    b = model_forward([pair[0]], [pair[1]], [pair[2]], init_params(CFG), CFG)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


def test_empty_search_cloud(pair, params):
    mu, logb = model_forward([pair[0]], [np.zeros((0, 3))], [pair[2]], params, CFG)
    assert mu.shape == (1, 4) and np.isfinite(mu.data).all() and np.isfinite(logb.data).all()


def test_point_permutation_invariance(pair, params):
    perm = np.random.default_rng(5).permutation(len(pair[1]))
    a = predict(pair[0], pair[1], pair[2], params, CFG)
    b = predict(pair[0], pair[1][perm], pair[2], params, CFG)
    assert np.allclose(a, b, atol=1e-12)


def test_parameter_counts():
    n_siam, _ = count_parameters(init_params(CFG))
    n_dual, _ = count_parameters(init_params(with_architecture(CFG, "dual")))
    assert n_siam == 54
    assert n_siam < n_dual


def test_overfit_one_pair():
    seq = synth_sequence(SynthConfig(n_frames=2, seed=4))
    s = make_sample(seq, 1, np.random.default_rng(0), TrainConfig(), CFG.voxels.ranges)
    p = init_params(CFG)
    opt = AdamW(p, lr=1e-3)
    first = float(batch_loss([s], p, CFG).data)
    for _ in range(50):
        train_step([s], p, opt, CFG, 1)
    assert float(batch_loss([s], p, CFG).data) < first


def test_config_round_trip():
    cfg = ModelConfig(architecture="dual", svfe_widths=(2, 4, 4, 8), use_bfe=False, seed=9)
    assert model_config_from_dict(model_config_to_dict(cfg)) == cfg


def test_unknown_architecture():
    with pytest.raises(ValueError):
        ModelConfig(architecture="triple")
