import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import naive_conv2d
from siammo.errors import MalformedFile, NonScalarLoss, ShapeMismatch
from siammo.gradcheck import op_checks
from siammo.tensor import (AdamW, Tensor, add, backward, concat_channels, conv2d, downsample2x,
                           dumps_checkpoint, global_max_pool, laplace_nll, linear, loads_checkpoint,
                           record_branches, relu, save_checkpoint, load_checkpoint, topological_order,
                           tsum)

LOG2 = math.log(2)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1
        assert np.array_equal(conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3))).data, x)

    def test_counting(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]))
        assert out.data[0, 0, 1, 1] == 9 and out.data[0, 0, 0, 0] == 4

    @pytest.mark.parametrize("stride,shape", [(1, (1, 2, 4, 4)), (2, (2, 3, 7, 6)), (2, (1, 1, 8, 8))])
    def test_naive_oracle(self, stride, shape):
        rng = np.random.default_rng(stride)
        x, w, b = rng.normal(size=shape), rng.normal(size=(4, shape[1], 3, 3)), rng.normal(size=4)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride).data
        assert np.max(np.abs(got - naive_conv2d(x, w, b, stride))) < 1e-12

    def test_output_size(self):
        x = Tensor(np.zeros((1, 1, 7, 8)))
        assert conv2d(x, Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(2)), 2).shape == (1, 2, 4, 4)
        assert downsample2x(x, Tensor(np.zeros((5, 1, 3, 3))), Tensor(np.zeros(5))).shape == (1, 5, 4, 4)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))


class TestLinear:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        assert np.array_equal(linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)

    def test_small(self):
        out = linear(Tensor([1.0, 2.0]), Tensor([[1.0, 0.0], [0.0, 2.0]]), Tensor([0.5, 0.0]))
        assert out.data.tolist() == [1.5, 4.0]

    def test_matmul_oracle(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 7)), rng.normal(size=7)
        ref = np.array([[sum(x[i, k] * w[k, j] for k in range(3)) + b[j] for j in range(7)] for i in range(5)])
        assert np.max(np.abs(linear(Tensor(x), Tensor(w), Tensor(b)).data - ref)) < 1e-12

    def test_mismatch(self):
        with pytest.raises(ShapeMismatch):
            linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


class TestElementwise:
    def test_relu(self):
        assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]

    def test_concat(self):
        a, b = np.ones((1, 2, 3, 3)), 2 * np.ones((1, 3, 3, 3))
        c = concat_channels([Tensor(a), Tensor(b)]).data
        assert c.shape == (1, 5, 3, 3)
        assert np.array_equal(c[:, :2], a) and np.array_equal(c[:, 2:], b)

    def test_gmp_spike(self):
        x = np.full((1, 2, 4, 4), -1.0)
        x[0, 0, 1, 2], x[0, 1, 3, 0] = 5.0, 7.0
        assert global_max_pool(Tensor(x)).data.tolist() == [[5.0, 7.0]]

    @given(st.integers(0, 1000))
    def test_gmp_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 3, 4, 5))
        perm = rng.permutation(20)
        y = x.reshape(2, 3, 20)[:, :, perm].reshape(2, 3, 4, 5)
        assert np.array_equal(global_max_pool(Tensor(x)).data, global_max_pool(Tensor(y)).data)

    def test_gmp_gradient_first_max(self):
        x = leaf(np.zeros((1, 1, 2, 2)))
        backward(tsum(global_max_pool(x)))
        assert x.grad.reshape(-1).tolist() == [1, 0, 0, 0]

    def test_add_mismatch(self):
        with pytest.raises(ShapeMismatch):
            add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


class TestLaplace:
    def test_zero_residual(self):
        t = np.array([0.1, 0.2, 0.3, 0.4])
        assert float(laplace_nll(Tensor(t), Tensor(np.zeros(4)), t).data) == pytest.approx(4 * LOG2)

    def test_unit_residual(self):
        out = laplace_nll(Tensor([1.0, 0, 0, 0]), Tensor(np.zeros(4)), np.zeros(4))
        assert float(out.data) == pytest.approx(1 + 4 * LOG2)

    def test_yaw_wrap(self):
        out = laplace_nll(Tensor([0, 0, 0, -math.pi + 0.1]), Tensor(np.zeros(4)), [0, 0, 0, math.pi - 0.1])
        assert float(out.data) == pytest.approx(0.2 + 4 * LOG2)

    @given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
    def test_lower_bound(self, r):
        out = float(laplace_nll(Tensor(r), Tensor(np.zeros(4)), np.zeros(4)).data)
        assert out >= 4 * LOG2 - 1e-12
        assert out - 4 * LOG2 == pytest.approx(sum(abs(v) for v in r), abs=1e-9)

    def test_batch_mean(self):
        mu = np.array([[1.0, 0, 0, 0], [0, 0, 0, 0]])
        out = laplace_nll(Tensor(mu), Tensor(np.zeros((2, 4))), np.zeros((2, 4)))
        assert float(out.data) == pytest.approx(0.5 + 4 * LOG2)


class TestBackward:
    def test_sum(self):
        x = leaf(np.random.default_rng(0).normal(size=(3, 4)))
        backward(tsum(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_relu_negative(self):
        x = leaf(-np.ones(5))
        backward(tsum(relu(x)))
        assert not x.grad.any()

    def test_non_scalar(self):
        with pytest.raises(NonScalarLoss):
            backward(relu(leaf(np.ones(3))))

    def test_shared_node_accumulates(self):
        x = leaf([1.0, 2.0])
        y = relu(x)
        backward(tsum(add(y, y)))
        assert x.grad.tolist() == [2.0, 2.0]

    def test_topological_order_visits_once(self):
        x = leaf([1.0])
        y = relu(x)
        z = add(y, y)
        order = topological_order(tsum(z))
        assert len(order) == len({id(n) for n in order})
        assert order.index(x) < order.index(y) < order.index(z)

    def test_branch_log(self):
        with record_branches() as log:
            relu(Tensor([-1.0, 2.0]))
        assert len(log) == 1 and log[0].tolist() == [False, True]


@pytest.mark.parametrize("result", op_checks(0), ids=lambda r: r.name)
def test_finite_differences(result):
    assert result.checked > 0
    assert result.max_rel_error < 1e-4


class TestAdamW:
    def test_zero_grad_no_decay(self):
        p = {"a": leaf([1.0, -2.0])}
        opt = AdamW(p, lr=1e-3, weight_decay=0.0)
        opt.step({"a": np.zeros(2)})
        assert p["a"].data.tolist() == [1.0, -2.0]

    def test_first_step(self):
        p = {"a": leaf([1.0])}
        AdamW(p, lr=1e-4, weight_decay=0.0).step({"a": np.array([1.0])})
        # bias-corrected m/sqrt(v) = 1 / (1 + eps)
        assert p["a"].data[0] == pytest.approx(1.0 - 1e-4, abs=1e-8)

    def test_decoupled_decay(self):
        p = {"a": leaf([3.0])}
        AdamW(p, lr=1e-4, weight_decay=0.01).step({"a": np.zeros(1)})
        assert p["a"].data[0] == pytest.approx(3.0 * (1 - 1e-6), abs=1e-15)

    def test_lr_zero_no_decay_bit_identical(self):
        x = np.random.default_rng(0).normal(size=5)
        p = {"a": leaf(x.copy())}
        AdamW(p, lr=0.0, weight_decay=0.0).step({"a": np.ones(5)})
        assert np.array_equal(p["a"].data, x)

    def test_grad_shape_checked(self):
        with pytest.raises(ShapeMismatch):
            AdamW({"a": leaf([1.0])}).step({"a": np.zeros(2)})

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=4)
        grads = rng.normal(size=(5, 4))
        p = {"a": leaf(x0.copy())}
        opt = AdamW(p, lr=1e-2, weight_decay=0.1)
        for g in grads:
            opt.step({"a": g})
        x, m, v = x0.copy(), np.zeros(4), np.zeros(4)
        for t, g in enumerate(grads, 1):
            x *= 1 - 1e-2 * 0.1
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p["a"].data, x, atol=1e-14)

    def test_state_round_trip(self):
        rng = np.random.default_rng(4)
        p = {"a": leaf(rng.normal(size=3))}
        opt = AdamW(p, lr=1e-2)
        opt.step({"a": rng.normal(size=3)})
        q = {"a": leaf(p["a"].data.copy())}
        opt2 = AdamW(q, lr=1e-2)
        opt2.load_state_records(loads_checkpoint(dumps_checkpoint(opt.state_records())))
        g = rng.normal(size=3)
        opt.step({"a": g})
        opt2.step({"a": g})
        assert np.array_equal(p["a"].data, q["a"].data)


class TestCheckpoint:
    @given(st.dictionaries(st.text(min_size=1, max_size=8),
                           st.lists(st.floats(allow_nan=False), min_size=0, max_size=6), max_size=4))
    @settings(max_examples=50)
    def test_bit_exact(self, d):
        rec = {k: np.array(v) for k, v in d.items()}
        rec["scalar"] = np.array(2.5)
        rec["matrix"] = np.arange(6.0).reshape(2, 3)
        data = dumps_checkpoint(rec)
        back = loads_checkpoint(data)
        assert list(back) == list(rec)
        assert dumps_checkpoint(back) == data
        for k in rec:
            assert back[k].shape == rec[k].shape
            assert np.array_equal(back[k].view(np.uint64), rec[k].astype("<f8").view(np.uint64))

    def test_file_round_trip(self, tmp_path):
        rec = {"w": np.random.default_rng(0).normal(size=(2, 3))}
        save_checkpoint(tmp_path / "c.bin", rec)
        assert np.array_equal(load_checkpoint(tmp_path / "c.bin")["w"], rec["w"])

    def test_bad_magic(self):
        with pytest.raises(MalformedFile):
            loads_checkpoint(b"NOTACKPT" + bytes(8))

    def test_truncated(self):
        data = dumps_checkpoint({"w": np.ones(10)})
        with pytest.raises(MalformedFile):
            loads_checkpoint(data[:-8])
        with pytest.raises(MalformedFile):
            loads_checkpoint(data[:14])
