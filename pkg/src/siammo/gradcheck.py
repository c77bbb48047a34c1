"""Central finite-difference checks of every differentiable op and of the whole model.

Errors are reported per input tensor as ``max |analytic - numeric|`` divided by
the largest analytic magnitude of that tensor, so near-zero entries do not
blow up the ratio. A difference quotient is only meaningful when ``x - eps``
and ``x + eps`` land on the same linear piece as ``x``; entries whose stencil
crosses a ReLU, max-pool or loss-sign switch are skipped and counted.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .network import ModelConfig, init_params, model_forward
from .sparseconv import flatten_to_bev, sparse_conv3_s2, sparse_relu, submanifold_conv3
from .tensor import (Tensor, _node, add, backward, concat_channels, conv2d, downsample2x,
                     global_max_pool, laplace_nll, linear, record_branches, relu, scale,
                     take_columns, tsum)
from .voxelizer import SparseVoxelTensor, VoxelIndex, encode_keys

EPS = 1e-5
OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float
    checked: int = 0
    skipped: int = 0

    @property
    def ok(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance


def project(x: Tensor, r: np.ndarray) -> Tensor:
    """``sum(x * r)``: a scalar whose gradient exercises every output entry differently."""
    return _node(np.array(np.sum(x.data * r)), (x,), lambda g: (g * r,), "project")


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def numeric_grad(f, x: np.ndarray, eps: float = EPS, entries=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place).

    Entries whose stencil changes the branch pattern come back as NaN.
    """
    with record_branches() as base:
        f()
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        old = flat[i]
        flat[i] = old + eps
        with record_branches() as up_log:
            up = f()
        flat[i] = old - eps
        with record_branches() as down_log:
            down = f()
        flat[i] = old
        smooth = _same(base, up_log) and _same(base, down_log)
        gflat[i] = (up - down) / (2 * eps) if smooth else np.nan
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, entries=None) -> float:
    a, n = analytic.reshape(-1), numeric.reshape(-1)
    sel = np.arange(a.size) if entries is None else np.asarray(entries)
    sel = sel[~np.isnan(n[sel])]
    a_sel, n_sel = a[sel], n[sel]
    denom = max(np.max(np.abs(a)) if a.size else 0.0, np.max(np.abs(n_sel)) if n_sel.size else 0.0, 1e-12)
    return float(np.max(np.abs(a_sel - n_sel)) / denom) if a_sel.size else 0.0


def check_function(name, build, inputs, tol=OP_TOL, eps=EPS, entries_per_input=None, rng=None):
    """Compare analytic and numeric gradients of scalar ``build(*inputs)``.

    ``inputs`` are leaf tensors; with ``entries_per_input`` only that many
    random entries of each are differenced.
    """
    t0 = time.perf_counter()
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    backward(build(*inputs))
    worst, checked, skipped = 0.0, 0, 0
    for x in inputs:
        entries = None
        if entries_per_input is not None and x.data.size > entries_per_input:
            entries = rng.choice(x.data.size, entries_per_input, replace=False)
        num = numeric_grad(lambda: float(build(*inputs).data), x.data, eps, entries)
        ana = x.grad if x.grad is not None else np.zeros_like(x.data)
        worst = max(worst, relative_error(ana, num, entries))
        sel = num.reshape(-1) if entries is None else num.reshape(-1)[entries]
        bad = int(np.isnan(sel).sum())
        checked += sel.size - bad
        skipped += bad
    return CheckResult(name, worst, tol, time.perf_counter() - t0, checked, skipped)


def _random_sparse(rng, grid=(6, 6, 6), batch=2, channels=3, density=0.3):
    n = batch * int(np.prod(grid))
    keys = np.flatnonzero(rng.uniform(size=n) < density)
    x, y, z = grid
    coords = np.stack([keys % x, keys // x % y, keys // (x * y) % z], axis=1)
    b = keys // (x * y * z)
    assert np.array_equal(encode_keys(coords, b, grid), keys)
    idx = VoxelIndex(coords, b, grid, batch)
    return idx, Tensor(rng.normal(size=(len(keys), channels)))


def op_checks(seed: int = 0) -> list:
    """One result per differentiable op on random float64 inputs."""
    rng = np.random.default_rng(seed)
    T = lambda *shape: Tensor(rng.normal(size=shape))  # noqa: E731
    out = []

    def run(name, fn, *inputs):
        shape = fn(*inputs).shape
        r = rng.normal(size=shape)
        out.append(check_function(name, lambda *xs: project(fn(*xs), r), list(inputs)))

    run("add", add, T(3, 4), T(3, 4))
    run("scale", lambda a: scale(a, -1.7), T(5))
    run("relu", relu, T(4, 5))
    run("tsum", lambda a: scale(tsum(a), 1.0), T(3, 3))
    run("take_columns", lambda a: take_columns(a, 1, 3), T(4, 5))
    run("concat_channels", lambda a, b: concat_channels([a, b]), T(2, 3, 4, 4), T(2, 2, 4, 4))
    run("global_max_pool", global_max_pool, T(2, 3, 5, 4))
    run("linear", linear, T(4, 6), T(6, 5), T(5))
    run("conv2d", lambda x, w, b: conv2d(x, w, b, 1), T(2, 3, 6, 5), T(4, 3, 3, 3), T(4))
    run("conv2d_stride2", lambda x, w, b: conv2d(x, w, b, 2), T(2, 3, 7, 6), T(4, 3, 3, 3), T(4))
    run("downsample2x", downsample2x, T(1, 2, 8, 8), T(3, 2, 3, 3), T(3))
    target = rng.normal(size=(3, 4))
    target[0, 3] = 3.0  # exercises the yaw wrap
    out.append(check_function("laplace_nll", lambda m, lb: laplace_nll(m, lb, target),
                              [T(3, 4), Tensor(rng.normal(scale=0.3, size=(3, 4)))]))

    idx, feats = _random_sparse(rng)

    def sparse_op(op):
        def fn(f, w, b):
            return op(SparseVoxelTensor(idx, f), w, b).feats
        return fn

    run("submanifold_conv3", sparse_op(submanifold_conv3), feats, T(4, 3, 3, 3, 3), T(4))
    idx2, feats2 = _random_sparse(rng)
    run("sparse_conv3_s2", lambda f, w, b: sparse_conv3_s2(SparseVoxelTensor(idx2, f), w, b).feats,
        feats2, T(4, 3, 3, 3, 3), T(4))
    idx3, feats3 = _random_sparse(rng)
    run("sparse_relu", lambda f: sparse_relu(SparseVoxelTensor(idx3, f)).feats, feats3)
    idx4, feats4 = _random_sparse(rng)
    run("flatten_to_bev", lambda f: flatten_to_bev(SparseVoxelTensor(idx4, f)), feats4)
    return out


def model_check(seed: int = 0, cfg: ModelConfig | None = None, entries_per_tensor: int = 2) -> CheckResult:
    """End-to-end loss gradient w.r.t. every parameter tensor (random entries of each)."""
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    (xl, xh), (yl, yh), (zl, zh) = cfg.voxels.ranges
    lo, hi = np.array([xl, yl, zl]), np.array([xh, yh, zh])
    prev = [rng.uniform(lo * 0.6, hi * 0.6, (150, 3))]
    search = [rng.uniform(lo * 0.6, hi * 0.6, (150, 3))]
    size = [np.array([3.9, 1.6, 1.5])]
    target = rng.normal(scale=0.2, size=(1, 4))
    names = list(params)

    def loss(*ts):
        mu, logb = model_forward(prev, search, size, dict(zip(names, ts)), cfg)
        return laplace_nll(mu, logb, target)

    return check_function("model_end_to_end", loss, [params[k] for k in names], MODEL_TOL,
                          entries_per_input=entries_per_tensor, rng=rng)


def run_suite(seed: int = 0) -> list:
    return op_checks(seed) + [model_check(seed)]
