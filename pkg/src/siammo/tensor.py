"""A small reverse-mode autodiff engine over float64 numpy arrays.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent. Nodes can
only reference tensors that already exist, so the graph is acyclic by
construction. :func:`backward` walks it in reverse topological order.
"""
from __future__ import annotations

import math
import struct
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import MalformedFile, NonScalarLoss, ShapeMismatch

LOG2 = math.log(2.0)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf", name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)


_branch_log: list | None = None


@contextmanager
def record_branches():
    """Collect the branch taken by every piecewise op run inside the block.

    ReLU masks, max-pool winners and loss residual signs are appended in call
    order; two runs took the same linear piece iff their logs are equal.
    """
    global _branch_log
    saved, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = saved


def _log_branch(a) -> None:
    if _branch_log is not None:
        _branch_log.append(np.array(a, copy=True))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_branch(mask)
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def take_columns(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[..., start:stop]``."""
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        gx[..., start:stop] = g
        return (gx,)

    return _node(x.data[..., start:stop].copy(), (x,), back, "slice")


def concat_channels(xs, axis: int = 1) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != axis):
            raise ShapeMismatch(f"concat: {x.shape} vs {ref} off axis {axis}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])
    out = np.concatenate([x.data for x in xs], axis=axis)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(xs)))

    return _node(out, xs, back, "concat")


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel max over all spatial positions: ``N x C x H x W -> N x C``.

    The gradient goes to the first maximal element in row-major scan order.
    """
    if x.data.ndim != 4:
        raise ShapeMismatch(f"global_max_pool expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    _log_branch(idx)
    out = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]

    def back(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=2)
        return (gx.reshape(n, c, h, w),)

    return _node(out, (x,), back, "gmp")


# ---------------------------------------------------------------------------
# affine ops


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` over the trailing dimension; ``w`` is ``D x E``."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = (x2 @ w.data + b.data).reshape(x.shape[:-1] + (w.shape[1],))

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)

    return _node(out, (x, w, b), back, "linear")


def conv2d_output_size(size: int, stride: int) -> int:
    return (size + 2 - 3) // stride + 1


def _im2col(xp: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1: stride, : stride * (wo - 1) + 1: stride]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * 9)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1: ``N x C x H x W -> N x O x H' x W'``."""
    if stride not in (1, 2):
        raise ShapeMismatch(f"conv2d stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"conv2d: x {x.shape}, w {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv2d: bias {b.shape} for {w.shape[0]} outputs")
    n, c, h, wd = x.shape
    o = w.shape[0]
    ho, wo = conv2d_output_size(h, stride), conv2d_output_size(wd, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, stride, ho, wo)
    wmat = w.data.reshape(o, c * 9)
    out = (cols @ wmat.T + b.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(n, ho, wo, c, 3, 3)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i: i + stride * ho: stride, j: j + stride * wo: stride] += \
                    gcols[..., i, j].transpose(0, 3, 1, 2)
        return gxp[:, :, 1:-1, 1:-1], gw, g2.sum(axis=0)

    return _node(out, (x, w, b), back, "conv2d")


def downsample2x(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Learned 2x down-sampling: a 3x3 stride-2 convolution (may widen channels)."""
    return conv2d(x, w, b, stride=2)


# ---------------------------------------------------------------------------
# loss


def wrap_residual(r: np.ndarray) -> np.ndarray:
    """Wrap the yaw column (last of 4) into (-pi, pi]."""
    r = r.copy()
    yaw = r[..., 3]
    outside = (yaw <= -np.pi) | (yaw > np.pi)
    r[..., 3] = np.where(outside, np.pi - np.mod(np.pi - yaw, 2 * np.pi), yaw)
    return r


def laplace_nll(mu: Tensor, logb: Tensor, target) -> Tensor:
    """Laplace negative log-likelihood with learned per-DOF log-scale.

    For a single 4-vector: ``sum_i logb_i + |t_i - mu_i| exp(-logb_i) + 4 log 2``.
    Batched ``B x 4`` inputs are averaged over the batch.
    """
    target = np.asarray(target, dtype=np.float64)
    if mu.shape != logb.shape or mu.shape != target.shape or mu.shape[-1] != 4:
        raise ShapeMismatch(f"laplace_nll: mu {mu.shape}, logb {logb.shape}, target {target.shape}")
    batch = 1 if mu.data.ndim == 1 else mu.shape[0]
    r = wrap_residual(target - mu.data)
    _log_branch(np.sign(r))
    inv_b = np.exp(-logb.data)
    per = logb.data + np.abs(r) * inv_b
    out = np.array(per.sum() / batch + 4 * LOG2)

    def back(g):
        g = float(g) / batch
        return -np.sign(r) * inv_b * g, (1.0 - np.abs(r) * inv_b) * g

    return _node(out, (mu, logb), back, "laplace_nll")


# ---------------------------------------------------------------------------
# parameters and optimizer


def init_uniform(shape, fan_in: int, rng, gain: float = 1.0) -> np.ndarray:
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: dict, lr=1e-4, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, grads: dict | None = None):
        """One update. ``grads`` defaults to each parameter's ``.grad`` (None counts as zero)."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k] if grads is not None else p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient for {k}: {g.shape} vs {p.data.shape}")
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            upd = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            p.data = p.data - self.lr * upd

    def state_records(self) -> dict:
        out = {"optim/step": np.array(float(self.t))}
        for k in self.params:
            out[f"optim/m/{k}"] = self.m[k]
            out[f"optim/v/{k}"] = self.v[k]
        return out

    def load_state_records(self, records: dict):
        self.t = int(records["optim/step"])
        for k in self.params:
            self.m[k] = records[f"optim/m/{k}"].copy()
            self.v[k] = records[f"optim/v/{k}"].copy()


# ---------------------------------------------------------------------------
# checkpoint file
#
#   magic b"SIAMMOCK", u32 version, u32 record count, then per record:
#   u32 name length, utf-8 name, u32 ndim, ndim x u64 shape, float64 payload
#   (all little-endian)

CKPT_MAGIC = b"SIAMMOCK"
CKPT_VERSION = 1


def dumps_checkpoint(records: dict) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads_checkpoint(data: bytes) -> dict:
    if data[:8] != CKPT_MAGIC:
        raise MalformedFile("not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 8)
        if version != CKPT_VERSION:
            raise MalformedFile(f"unsupported checkpoint version {version}")
        pos = 16
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos: pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(data):
                raise MalformedFile("truncated checkpoint payload")
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += 8 * size
    except struct.error as e:
        raise MalformedFile(f"truncated checkpoint: {e}") from e
    return out


def save_checkpoint(path, records: dict) -> None:
    with open(path, "wb") as f:
        f.write(dumps_checkpoint(records))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        return loads_checkpoint(f.read())
