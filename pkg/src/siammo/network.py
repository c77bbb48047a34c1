"""The Siamese motion network: voxel encoder, BEV pyramid, multi-scale fusion, motion head.

Parameters live in a flat ``{name: Tensor}`` dict so they can be checkpointed
and handed to the optimizer directly. Forward passes are batched: a batch of
frame pairs shares one sparse tensor (voxels carry a batch index).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ShapeMismatch
from .sparseconv import flatten_to_bev, sparse_conv3_s2, sparse_relu, submanifold_conv3
from .tensor import (Tensor, add, concat_channels, conv2d, downsample2x, global_max_pool,
                     init_uniform, linear, relu, take_columns)
from .voxelizer import DESK_VOXELS, CAR_VOXELS, VoxelConfig, concat_voxel_features, voxelize_batch

ARCHITECTURES = ("siamese", "dual", "single")
DBFE_STRIDES = (1, 2, 4)


@dataclass
class ModelConfig:
    architecture: str = "siamese"
    svfe_widths: tuple = (4, 8, 8, 16)
    dbfe_widths: tuple = (16, 32, 32)
    motion_widths: tuple | None = None  # defaults to 2x DBFE widths
    head_hidden: int | None = None  # defaults to the last motion width
    use_bfe: bool = True
    relu_last_motion: bool = False
    init_gain: float = math.sqrt(6.0)  # He-uniform; 1.0 gives +-1/sqrt(fan_in)
    voxels: VoxelConfig = field(default_factory=lambda: DESK_VOXELS)
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        self.svfe_widths = tuple(int(v) for v in self.svfe_widths)
        self.dbfe_widths = tuple(int(v) for v in self.dbfe_widths)
        if len(self.svfe_widths) != 4 or len(self.dbfe_widths) != 3:
            raise ValueError("need 4 SVFE widths and 3 DBFE widths")
        if self.motion_widths is None:
            self.motion_widths = tuple(2 * d for d in self.dbfe_widths)
        self.motion_widths = tuple(int(v) for v in self.motion_widths)
        if min(self.svfe_widths + self.dbfe_widths + self.motion_widths) <= 0:
            raise ValueError("widths must be positive")
        if self.head_hidden is None:
            self.head_hidden = self.motion_widths[-1]

    @property
    def strides(self) -> tuple:
        return DBFE_STRIDES

    @property
    def bev_shape(self) -> tuple:
        """Spatial shape of the stride-1 BEV map (grid / 8)."""
        x, y, z = self.voxels.grid_shape
        return x // 8, y // 8, z // 8

    @property
    def fused_widths(self) -> tuple:
        """Channel width of the per-scale input to the fusion convs."""
        k = 1 if self.architecture == "single" else 2
        return tuple(k * d for d in self.dbfe_widths)


PAPER_CAR = ModelConfig(svfe_widths=(16, 32, 64, 128), dbfe_widths=(128, 256, 256),
                        voxels=CAR_VOXELS)


# ---------------------------------------------------------------------------
# parameters


def _conv3d(params, name, c_in, c_out, rng, gain=1.0):
    fan = c_in * 9  # surface voxels see about a 3x3 patch of active neighbours
    params[f"{name}.w"] = Tensor(init_uniform((c_out, c_in, 3, 3, 3), fan, rng, gain), True)
    params[f"{name}.b"] = Tensor(init_uniform((c_out,), fan, rng), True)


def _conv2d(params, name, c_in, c_out, rng, gain=1.0):
    fan = c_in * 9
    params[f"{name}.w"] = Tensor(init_uniform((c_out, c_in, 3, 3), fan, rng, gain), True)
    params[f"{name}.b"] = Tensor(init_uniform((c_out,), fan, rng), True)


def _linear(params, name, d_in, d_out, rng, gain=1.0):
    params[f"{name}.w"] = Tensor(init_uniform((d_in, d_out), d_in, rng, gain), True)
    params[f"{name}.b"] = Tensor(init_uniform((d_out,), d_in, rng), True)


def _encoder_params(params, prefix, cfg: ModelConfig, c_in: int, rng, g):
    w = cfg.svfe_widths
    prev = c_in
    for s in range(4):
        if s > 0:
            _conv3d(params, f"{prefix}.svfe{s}.down", prev, w[s], rng, g)
            prev = w[s]
        _conv3d(params, f"{prefix}.svfe{s}.subm0", prev, w[s], rng, g)
        _conv3d(params, f"{prefix}.svfe{s}.subm1", w[s], w[s], rng, g)
        prev = w[s]
    z_out = cfg.voxels.grid_shape[2] // 8
    d = cfg.dbfe_widths
    _conv2d(params, f"{prefix}.dbfe0.adapt", w[3] * z_out, d[0], rng, g)
    _conv2d(params, f"{prefix}.dbfe0.conv", d[0], d[0], rng, g)
    _conv2d(params, f"{prefix}.dbfe1.down", d[0], d[1], rng, g)
    _conv2d(params, f"{prefix}.dbfe1.conv", d[1], d[1], rng, g)
    _conv2d(params, f"{prefix}.dbfe2.down", d[1], d[2], rng, g)
    _conv2d(params, f"{prefix}.dbfe2.conv", d[2], d[2], rng, g)


def init_params(cfg: ModelConfig, seed: int | None = None) -> dict:
    """Uniform(+-gain/sqrt(fan_in)) weights, uniform(+-1/sqrt(fan_in)) biases, in a fixed order."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    p: dict = {}
    g = cfg.init_gain
    if cfg.architecture == "siamese":
        _encoder_params(p, "enc", cfg, 3, rng, g)
    elif cfg.architecture == "dual":
        _encoder_params(p, "enc_prev", cfg, 3, rng, g)
        _encoder_params(p, "enc_search", cfg, 3, rng, g)
    else:
        _encoder_params(p, "enc", cfg, 6, rng, g)
    f, m = cfg.fused_widths, cfg.motion_widths
    _conv2d(p, "stfa.m0", f[0], m[0], rng, g)
    _conv2d(p, "stfa.down1", m[0], f[1], rng, g)
    _conv2d(p, "stfa.m1", f[1], m[1], rng, g)
    _conv2d(p, "stfa.down2", m[1], f[2], rng, g)
    _conv2d(p, "stfa.m2", f[2], m[2], rng, g)
    _linear(p, "bfe.fc0", 3, m[2], rng, g)
    _linear(p, "bfe.fc1", m[2], m[2], rng, g)
    hid = cfg.head_hidden
    _linear(p, "head.fc0", m[2], hid, rng, g)
    _linear(p, "head.fc1", hid, hid, rng, g)
    _linear(p, "head.out", hid, 8, rng, g)
    return p


def count_parameters(params: dict) -> tuple:
    """``(number of tensors, number of scalars)``."""
    return len(params), int(sum(t.data.size for t in params.values()))


# ---------------------------------------------------------------------------
# forward


def encoder_forward(vox, params, prefix, cfg: ModelConfig):
    """SVFE (sparse, 8x down-sampling) then DBFE (dense BEV at strides 1, 2, 4)."""
    x = vox
    for s in range(4):
        if s > 0:
            x = sparse_relu(sparse_conv3_s2(x, params[f"{prefix}.svfe{s}.down.w"],
                                            params[f"{prefix}.svfe{s}.down.b"]))
        for j in range(2):
            x = sparse_relu(submanifold_conv3(x, params[f"{prefix}.svfe{s}.subm{j}.w"],
                                              params[f"{prefix}.svfe{s}.subm{j}.b"]))
    bev = flatten_to_bev(x)

    def c(t, name, stride=1):
        return relu(conv2d(t, params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"], stride))

    f1 = c(c(bev, "dbfe0.adapt"), "dbfe0.conv")
    f2 = c(c(f1, "dbfe1.down", 2), "dbfe1.conv")
    f3 = c(c(f2, "dbfe2.down", 2), "dbfe2.conv")
    return [f1, f2, f3]


def sfe_forward(prev_vox, search_vox, params, cfg: ModelConfig):
    """Feature pyramids of both frames.

    ``siamese`` runs one encoder on both inputs, ``dual`` one encoder each,
    ``single`` concatenates the voxel features first and returns ``(F, None)``.
    """
    if prev_vox.grid_shape != search_vox.grid_shape:
        raise ShapeMismatch(f"grids differ: {prev_vox.grid_shape} vs {search_vox.grid_shape}")
    if cfg.architecture == "siamese":
        return encoder_forward(prev_vox, params, "enc", cfg), encoder_forward(search_vox, params, "enc", cfg)
    if cfg.architecture == "dual":
        return (encoder_forward(prev_vox, params, "enc_prev", cfg),
                encoder_forward(search_vox, params, "enc_search", cfg))
    return encoder_forward(concat_voxel_features(prev_vox, search_vox), params, "enc", cfg), None


def stfa_forward(f_prev, f_search, params, cfg: ModelConfig) -> Tensor:
    """Fuse the two pyramids scale by scale and global-max-pool the last motion map."""

    def fused(i):
        if f_search is None:
            return f_prev[i]
        if f_prev[i].shape != f_search[i].shape:
            raise ShapeMismatch(f"pyramid level {i}: {f_prev[i].shape} vs {f_search[i].shape}")
        return concat_channels([f_prev[i], f_search[i]])

    def conv(t, name, stride=1):
        return conv2d(t, params[f"stfa.{name}.w"], params[f"stfa.{name}.b"], stride)

    m = relu(conv(fused(0), "m0"))
    m = relu(downsample2x(m, params["stfa.down1.w"], params["stfa.down1.b"]))
    m = relu(conv(add(m, fused(1)), "m1"))
    m = relu(downsample2x(m, params["stfa.down2.w"], params["stfa.down2.b"]))
    m = conv(add(m, fused(2)), "m2")
    if cfg.relu_last_motion:
        m = relu(m)
    return global_max_pool(m)


def bfe_head(m_out: Tensor, size, params, cfg: ModelConfig):
    """Add the encoded box size to the motion feature and regress 4 means + 4 log-scales."""
    size = np.asarray(size, dtype=np.float64).reshape(-1, 3)
    if size.shape[0] != m_out.shape[0]:
        raise ShapeMismatch(f"{size.shape[0]} sizes for a batch of {m_out.shape[0]}")
    h = m_out
    if cfg.use_bfe:
        e = linear(relu(linear(Tensor(size), params["bfe.fc0.w"], params["bfe.fc0.b"])),
                   params["bfe.fc1.w"], params["bfe.fc1.b"])
        h = add(h, e)
    h = relu(linear(h, params["head.fc0.w"], params["head.fc0.b"]))
    h = relu(linear(h, params["head.fc1.w"], params["head.fc1.b"]))
    out = linear(h, params["head.out.w"], params["head.out.b"])
    return _split(out)


def _split(out: Tensor):
    return take_columns(out, 0, 4), take_columns(out, 4, 8)


def model_forward(prev_clouds, search_clouds, sizes, params, cfg: ModelConfig):
    """Batched forward over canonical-frame cloud pairs: returns ``(mu, logb)``, each ``B x 4``."""
    if len(prev_clouds) != len(search_clouds):
        raise ShapeMismatch("need as many previous clouds as search clouds")
    prev_vox = voxelize_batch(prev_clouds, cfg.voxels)
    search_vox = voxelize_batch(search_clouds, cfg.voxels)
    f_prev, f_search = sfe_forward(prev_vox, search_vox, params, cfg)
    m_out = stfa_forward(f_prev, f_search, params, cfg)
    return bfe_head(m_out, sizes, params, cfg)


def predict(prev_cloud, search_cloud, size, params, cfg: ModelConfig) -> np.ndarray:
    """Motion mean for a single pair as a length-4 array."""
    mu, _ = model_forward([prev_cloud], [search_cloud], [size], params, cfg)
    return mu.data[0].copy()


# ---------------------------------------------------------------------------
# config text (nested key-value) round trip


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "architecture": cfg.architecture,
        "svfe_widths": list(cfg.svfe_widths),
        "dbfe_widths": list(cfg.dbfe_widths),
        "motion_widths": list(cfg.motion_widths),
        "head_hidden": cfg.head_hidden,
        "use_bfe": cfg.use_bfe,
        "relu_last_motion": cfg.relu_last_motion,
        "init_gain": cfg.init_gain,
        "seed": cfg.seed,
        "voxels": {"ranges": [list(r) for r in cfg.voxels.ranges],
                   "voxel_size": list(cfg.voxels.voxel_size)},
    }


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    vox = d.pop("voxels", None)
    if vox is not None:
        d["voxels"] = VoxelConfig(tuple(tuple(r) for r in vox["ranges"]), tuple(vox["voxel_size"]))
    unknown = set(d) - set(ModelConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**d)


def with_architecture(cfg: ModelConfig, architecture: str) -> ModelConfig:
    return replace(cfg, architecture=architecture, motion_widths=None, head_hidden=None)
