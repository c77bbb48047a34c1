"""Mean-coordinate voxelization into hash-indexed sparse voxel tensors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


def _pad8(n: int) -> int:
    return -(-n // 8) * 8


@dataclass(frozen=True)
class VoxelConfig:
    ranges: tuple = ((-4.8, 4.8), (-4.8, 4.8), (-1.2, 1.2))
    voxel_size: tuple = (0.15, 0.15, 0.15)

    @property
    def lower(self) -> np.ndarray:
        return np.array([r[0] for r in self.ranges], dtype=np.float64)

    @property
    def grid_shape(self) -> tuple:
        """Cells per axis, padded up to a multiple of 8."""
        out = []
        for (lo, hi), s in zip(self.ranges, self.voxel_size):
            n = math.ceil((hi - lo) / s - 1e-9)
            out.append(_pad8(n))
        return tuple(out)


# paper-scale configurations per category family
CAR_VOXELS = VoxelConfig(((-4.8, 4.8), (-4.8, 4.8), (-1.5, 1.5)), (0.075, 0.075, 0.15))
PEDESTRIAN_VOXELS = VoxelConfig(((-1.92, 1.92), (-1.92, 1.92), (-1.5, 1.5)), (0.03, 0.03, 0.15))
LARGE_VOXELS = VoxelConfig(((-9.6, 9.6), (-9.6, 9.6), (-3.0, 3.0)), (0.15, 0.15, 0.3))
DESK_VOXELS = VoxelConfig()

DIRECT_TABLE_LIMIT = 1 << 24


class VoxelIndex:
    """Active voxel coordinates of a batch of grids, sorted by hash key.

    The key of ``(b, ix, iy, iz)`` is ``ix + X * (iy + Y * (iz + Z * b))``,
    collision-free inside the grid. Kernel maps built against this index are
    cached on it, so layers that keep the active set share them.
    """

    def __init__(self, coords, batch, grid_shape, batch_size):
        self.coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        self.batch = np.asarray(batch, dtype=np.int64).reshape(-1)
        self.grid_shape = tuple(int(g) for g in grid_shape)
        self.batch_size = int(batch_size)
        self.keys = encode_keys(self.coords, self.batch, self.grid_shape)
        if len(self.keys) > 1 and not np.all(np.diff(self.keys) > 0):
            raise ValueError("voxel coordinates must be unique and sorted by key")
        self.cache = {}
        self._lookup = None

    def __len__(self):
        return len(self.keys)

    def find(self, keys) -> np.ndarray:
        """Row index of each key, or -1 where the voxel is inactive."""
        keys = np.asarray(keys, dtype=np.int64)
        if len(self.keys) == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        table = self._table()
        if table is not None:
            return table[keys]
        pos = np.minimum(np.searchsorted(self.keys, keys), len(self.keys) - 1)
        return np.where(self.keys[pos] == keys, pos, -1)

    def _table(self):
        # direct-address table over the whole batch grid while it stays small
        if "table" not in self.cache:
            n = self.batch_size * int(np.prod(self.grid_shape))
            table = None
            if n <= DIRECT_TABLE_LIMIT:
                table = np.full(n, -1, dtype=np.int64)
                table[self.keys] = np.arange(len(self.keys))
            self.cache["table"] = table
        return self.cache["table"]

    def index_of(self, ix, iy, iz, b=0):
        """O(1) expected single-voxel lookup (None when inactive)."""
        if self._lookup is None:
            self._lookup = {int(k): i for i, k in enumerate(self.keys)}
        x, y, z = self.grid_shape
        return self._lookup.get(ix + x * (iy + y * (iz + z * b)))


def encode_keys(coords, batch, grid_shape) -> np.ndarray:
    x, y, z = grid_shape
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return c[:, 0] + x * (c[:, 1] + y * (c[:, 2] + z * np.asarray(batch, dtype=np.int64)))


def decode_keys(keys, grid_shape):
    x, y, z = grid_shape
    keys = np.asarray(keys, dtype=np.int64)
    ix = keys % x
    rest = keys // x
    iy = rest % y
    rest //= y
    iz = rest % z
    return np.stack([ix, iy, iz], axis=1), rest // z


@dataclass
class SparseVoxelTensor:
    index: VoxelIndex
    feats: Tensor

    @property
    def coords(self) -> np.ndarray:
        return self.index.coords

    @property
    def grid_shape(self) -> tuple:
        return self.index.grid_shape

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def __len__(self):
        return len(self.index)

    def dense(self) -> np.ndarray:
        """``B x C x X x Y x Z`` dense copy of the feature values."""
        x, y, z = self.grid_shape
        out = np.zeros((self.index.batch_size, self.channels, x, y, z))
        c = self.coords
        out[self.index.batch, :, c[:, 0], c[:, 1], c[:, 2]] = self.feats.data
        return out


def voxelize_batch(clouds, cfg: VoxelConfig) -> SparseVoxelTensor:
    return voxelize_with_counts(clouds, cfg)[0]


def voxelize_with_counts(clouds, cfg: VoxelConfig):
    """Voxelize a list of canonical-frame clouds; each voxel's feature is its points' mean.

    Points are sorted by (voxel, x, y, z) before summation, so the result does
    not depend on input order. Points outside the grid are ignored.
    """
    grid = cfg.grid_shape
    lower, size = cfg.lower, np.asarray(cfg.voxel_size, dtype=np.float64)
    all_pts, all_b = [], []
    for b, pc in enumerate(clouds):
        p = np.asarray(pc, dtype=np.float64).reshape(-1, 3)
        all_pts.append(p)
        all_b.append(np.full(len(p), b, dtype=np.int64))
    pts = np.concatenate(all_pts) if all_pts else np.zeros((0, 3))
    bidx = np.concatenate(all_b) if all_b else np.zeros(0, np.int64)
    ijk = np.floor((pts - lower) / size).astype(np.int64)
    ok = np.all((ijk >= 0) & (ijk < np.array(grid)), axis=1)
    pts, ijk, bidx = pts[ok], ijk[ok], bidx[ok]
    keys = encode_keys(ijk, bidx, grid)
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], keys))
    keys, pts = keys[order], pts[order]
    if len(keys):
        starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
        counts = np.diff(np.r_[starts, len(keys)])
        feats = np.add.reduceat(pts, starts, axis=0) / counts[:, None]
        ukeys = keys[starts]
    else:
        feats, ukeys, counts = np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0, np.int64)
    coords, batch = decode_keys(ukeys, grid)
    return SparseVoxelTensor(VoxelIndex(coords, batch, grid, len(clouds)), Tensor(feats)), counts


def voxelize(points, cfg: VoxelConfig) -> SparseVoxelTensor:
    return voxelize_batch([points], cfg)


def concat_voxel_features(a: SparseVoxelTensor, b: SparseVoxelTensor) -> SparseVoxelTensor:
    """Union of two active sets with features stacked ``[a | b]``; missing sides are zero."""
    if a.grid_shape != b.grid_shape or a.index.batch_size != b.index.batch_size:
        raise ValueError("voxel tensors live on different grids")
    keys = np.union1d(a.index.keys, b.index.keys)
    feats = np.zeros((len(keys), a.channels + b.channels))
    feats[np.searchsorted(keys, a.index.keys), : a.channels] = a.feats.data
    feats[np.searchsorted(keys, b.index.keys), a.channels:] = b.feats.data
    coords, batch = decode_keys(keys, a.grid_shape)
    return SparseVoxelTensor(VoxelIndex(coords, batch, a.grid_shape, a.index.batch_size), Tensor(feats))
