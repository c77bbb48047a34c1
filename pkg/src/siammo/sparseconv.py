"""Sparse 3D convolutions over :class:`SparseVoxelTensor` and the BEV flattening.

Both convolutions use a 3x3x3 kernel laid out ``C_out x C_in x 3 x 3 x 3``.
A :class:`KernelMap` lists the (input, output) voxel pairs of every tap;
the convolution is gather -> per-tap GEMM -> scatter-add.
"""
from __future__ import annotations

import itertools

import numpy as np

from .errors import ShapeMismatch
from .tensor import Tensor, _node, relu
from .voxelizer import SparseVoxelTensor, VoxelIndex, decode_keys, encode_keys

# tap k = 9 * a + 3 * b + c  for kernel position (a, b, c)
TAPS = np.array(list(itertools.product(range(3), repeat=3)), dtype=np.int64)


class KernelMap:
    """(input row, output row) pairs for each of the 27 kernel taps.

    Pairs are stored sorted by tap; ``bounds[k]:bounds[k + 1]`` is tap ``k``'s
    slice. Within a tap every input and every output appears at most once.
    """

    def __init__(self, in_rows, out_rows, taps, n_in: int, out_index: VoxelIndex):
        if len(taps) > 1 and np.any(taps[1:] < taps[:-1]):
            order = np.argsort(taps, kind="stable")
            in_rows, out_rows, taps = in_rows[order], out_rows[order], taps[order]
        self.in_rows = in_rows
        self.out_rows = out_rows
        self.bounds = np.searchsorted(taps, np.arange(28))
        self.n_in = n_in
        self.n_out = len(out_index)
        self.out_index = out_index
        self.spans = [(k, self.bounds[k], self.bounds[k + 1]) for k in range(27)
                      if self.bounds[k + 1] > self.bounds[k]]

    def pairs(self, tap: int):
        """``(input rows, output rows)`` for one kernel tap."""
        s, e = self.bounds[tap], self.bounds[tap + 1]
        return self.in_rows[s:e], self.out_rows[s:e]

    @property
    def n_pairs(self) -> int:
        return len(self.in_rows)


def _tap_valid(per_axis):
    """``(27, N)`` mask from three ``(N, 3)`` per-axis masks, tap-major."""
    ax, ay, az = per_axis
    return (ax.T[:, None, None] & ay.T[None, :, None] & az.T[None, None, :]).reshape(27, -1)


def submanifold_kernel_map(index: VoxelIndex) -> KernelMap:
    """Pairs for stride-1 convolution whose outputs are exactly the input active set."""
    if "subm" in index.cache:
        return index.cache["subm"]
    grid = np.array(index.grid_shape)
    c = index.coords
    d = np.arange(-1, 2)
    ok = _tap_valid([((c[:, a, None] + d) >= 0) & ((c[:, a, None] + d) < grid[a]) for a in range(3)])
    taps, rows = np.nonzero(ok)
    # the key is linear in the coordinates, so a tap shifts it by a constant
    x, y, _ = index.grid_shape
    shift = (TAPS - 1) @ np.array([1, x, x * y])
    src = index.find(index.keys[rows] + shift[taps])
    hit = src >= 0
    km = KernelMap(src[hit], rows[hit], taps[hit], len(index), index)
    index.cache["subm"] = km
    return km


def strided_kernel_map(index: VoxelIndex) -> KernelMap:
    """Pairs for kernel 3, stride 2, padding 1 onto the half-resolution grid.

    Output site ``q`` reads input ``p = 2 q + tap - 1``; an output is active
    when at least one of its taps lands on an active input.
    """
    if "s2" in index.cache:
        return index.cache["s2"]
    if any(g % 2 for g in index.grid_shape):
        raise ShapeMismatch(f"stride-2 conv needs even grid extents, got {index.grid_shape}")
    half = np.array([g // 2 for g in index.grid_shape])
    num = index.coords[:, :, None] + 1 - np.arange(3)  # N x axis x tap offset
    q = num // 2
    valid = (num % 2 == 0) & (num >= 0) & (q < half[:, None])
    ok = _tap_valid([valid[:, a] for a in range(3)])
    taps, rows = np.nonzero(ok)
    a, b, c = TAPS[taps].T
    out_c = np.stack([q[rows, 0, a], q[rows, 1, b], q[rows, 2, c]], axis=1)
    keys = encode_keys(out_c, index.batch[rows], tuple(half))
    out_keys, inverse = np.unique(keys, return_inverse=True)
    coords, batch = decode_keys(out_keys, tuple(half))
    out_index = VoxelIndex(coords, batch, tuple(half), index.batch_size)
    km = KernelMap(rows, inverse.reshape(-1), taps, len(index), out_index)
    index.cache["s2"] = km
    return km


def _check_weights(x: SparseVoxelTensor, w: Tensor, b: Tensor):
    if w.data.ndim != 5 or w.shape[2:] != (3, 3, 3) or w.shape[1] != x.channels:
        raise ShapeMismatch(f"sparse conv weights {w.shape} for {x.channels} input channels")
    if b.shape != (w.shape[0],):
        raise ShapeMismatch(f"sparse conv bias {b.shape} for {w.shape[0]} outputs")


def apply_kernel_map(feats: Tensor, km: KernelMap, w: Tensor, b: Tensor) -> Tensor:
    """Sum over taps of ``feats[in] @ W_tap`` scattered onto ``out``, plus bias."""
    c_out, c_in = w.shape[:2]
    wk = w.data.transpose(2, 3, 4, 1, 0).reshape(27, c_in, c_out)
    x = feats.data
    xi = x[km.in_rows]  # one gather; each tap is then a contiguous slice
    spans = km.spans
    out = np.zeros((km.n_out, c_out))
    for k, s, e in spans:
        out[km.out_rows[s:e]] += xi[s:e] @ wk[k]
    out += b.data

    def back(g):
        go = g[km.out_rows]
        gw = np.zeros_like(wk)
        gx = np.zeros_like(x)
        for k, s, e in spans:
            gw[k] = xi[s:e].T @ go[s:e]
            gx[km.in_rows[s:e]] += go[s:e] @ wk[k].T
        return gx, gw.reshape(3, 3, 3, c_in, c_out).transpose(4, 3, 0, 1, 2), g.sum(axis=0)

    return _node(out, (feats, w, b), back, "sparse_conv3")


def submanifold_conv3(x: SparseVoxelTensor, w: Tensor, b: Tensor) -> SparseVoxelTensor:
    """Stride-1 3x3x3 conv whose active set equals the input's."""
    _check_weights(x, w, b)
    km = submanifold_kernel_map(x.index)
    return SparseVoxelTensor(x.index, apply_kernel_map(x.feats, km, w, b))


def sparse_conv3_s2(x: SparseVoxelTensor, w: Tensor, b: Tensor) -> SparseVoxelTensor:
    """Regular sparse conv, kernel 3, stride 2, padding 1, onto the half-resolution grid."""
    _check_weights(x, w, b)
    km = strided_kernel_map(x.index)
    return SparseVoxelTensor(km.out_index, apply_kernel_map(x.feats, km, w, b))


def sparse_relu(x: SparseVoxelTensor) -> SparseVoxelTensor:
    return SparseVoxelTensor(x.index, relu(x.feats))


def flatten_to_bev(x: SparseVoxelTensor) -> Tensor:
    """Collapse Z into channels: ``B x (C * Z) x X x Y`` with block ``z`` at channels ``z*C .. z*C+C``."""
    gx, gy, gz = x.grid_shape
    c = x.channels
    bsz = x.index.batch_size
    coords, batch = x.coords, x.index.batch
    out = np.zeros((bsz, gz, c, gx, gy))
    out[batch, coords[:, 2], :, coords[:, 0], coords[:, 1]] = x.feats.data

    def back(g):
        return (g.reshape(bsz, gz, c, gx, gy)[batch, coords[:, 2], :, coords[:, 0], coords[:, 1]],)

    return _node(out.reshape(bsz, gz * c, gx, gy), (x.feats,), back, "flatten_bev")
