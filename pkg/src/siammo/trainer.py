"""Training pairs with box jitter, motion and flip augmentation; the optimization loop."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .errors import EmptyDataset, FrameOutOfRange
from .geometry import (Box3D, MotionVector, apply_rtm, box_from_canonical, box_to_canonical,
                       rtm_between, to_canonical)
from .network import ModelConfig, init_params, model_forward
from .pointcloud_io import crop_range
from .tensor import AdamW, backward, laplace_nll, load_checkpoint, save_checkpoint, scale

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 256
    micro_batch: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    box_jitter: bool = True
    motion_augment: bool = True
    flip: bool = True
    rot_jitter_deg: float = 6.0
    trans_jitter: float = 0.3
    motion_sigma: tuple = (0.3, 0.2, 0.1)
    seed: int = 0
    workers: int = 1
    max_steps: int | None = None
    schedule: str = "constant"
    warmup_steps: int = 0

    def __post_init__(self):
        self.motion_sigma = tuple(float(v) for v in self.motion_sigma)
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")


SCHEDULES = ("constant", "cosine")


# desk-scale overrides: CPU-sized batches, a faster rate annealed to zero.
# Without normalization layers, full-size Adam steps from the first update
# shrink every layer at once and can leave the output input-independent.
DESK_TRAIN = dict(epochs=30, batch_size=16, lr=3e-3, schedule="cosine", warmup_steps=100)


def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    """Rate for 0-based optimizer ``step`` out of ``total``, after a linear warmup."""
    lr = cfg.lr
    if cfg.schedule == "cosine" and total > 0:
        lr = 0.5 * lr * (1.0 + math.cos(math.pi * min(step, total) / total))
    if step < cfg.warmup_steps:
        lr *= (step + 1) / cfg.warmup_steps
    return lr


def total_steps(data, cfg: TrainConfig) -> int:
    per_epoch = -(-len(sample_pairs(data)) // cfg.batch_size)
    n = per_epoch * cfg.epochs
    return n if cfg.max_steps is None else min(n, cfg.max_steps)


@dataclass
class TrainSample:
    """A frame pair in the canonical frame of the (perturbed) reference box.

    ``ref_box`` and ``gt_box`` are world-frame boxes with
    ``apply_rtm(ref_box, target) == gt_box``; ``prev_box`` is the true
    box in the ``prev`` cloud, which the temporal flip turns into the target.
    """

    prev: np.ndarray
    search: np.ndarray
    size: np.ndarray
    target: MotionVector
    ref_box: Box3D
    gt_box: Box3D
    prev_box: Box3D


def make_sample(seq, t: int, rng, cfg: TrainConfig = None, ranges=None) -> TrainSample:
    """Training pair for frames ``t - 1`` and ``t`` (0-based, ``1 <= t < len(seq)``)."""
    cfg = cfg or TrainConfig()
    if not 1 <= t < len(seq):
        raise FrameOutOfRange(f"frame {t} outside 1..{len(seq) - 1}")
    gt_prev, gt_cur = seq.gt_boxes[t - 1], seq.gt_boxes[t]
    ref = gt_prev
    if cfg.box_jitter:
        dyaw = math.radians(rng.uniform(-cfg.rot_jitter_deg, cfg.rot_jitter_deg))
        shift = rng.uniform(-cfg.trans_jitter, cfg.trans_jitter, 3)
        ref = gt_prev.with_pose(gt_prev.center + shift, gt_prev.yaw + dyaw)
    prev = to_canonical(seq.frames[t - 1], ref)
    search = to_canonical(seq.frames[t], ref)
    cur = box_to_canonical(gt_cur, ref)
    if cfg.motion_augment:
        delta = rng.normal(0.0, 1.0, 3) * np.asarray(cfg.motion_sigma)
        search = search + delta
        cur = cur.with_pose(cur.center + delta, cur.yaw)
    if ranges is not None:
        prev, search = crop_range(prev, ranges), crop_range(search, ranges)
    target = MotionVector(cur.cx, cur.cy, cur.cz, cur.yaw)
    return TrainSample(prev, search, ref.size, target, ref, box_from_canonical(cur, ref), gt_prev)


def hflip(s: TrainSample) -> TrainSample:
    """Mirror ``y -> -y`` in the reference frame."""
    m = np.array([1.0, -1.0, 1.0])
    tgt = MotionVector(s.target.dx, -s.target.dy, s.target.dz, -s.target.dyaw)
    p = box_to_canonical(s.prev_box, s.ref_box)
    mirrored = Box3D(p.cx, -p.cy, p.cz, p.w, p.l, p.h, -p.yaw)
    return replace(s, prev=s.prev * m, search=s.search * m, target=tgt,
                   gt_box=apply_rtm(s.ref_box, tgt), prev_box=box_from_canonical(mirrored, s.ref_box))


def tflip(s: TrainSample, ranges=None) -> TrainSample:
    """Swap the two frames and re-express everything in the frame-t box's frame.

    The new reference is the frame-t box and the new target is the true
    previous box, so the jitter of the old reference does not leak into it.
    """
    cur = Box3D(s.target.dx, s.target.dy, s.target.dz, *s.size, s.target.dyaw)
    prev = to_canonical(s.search, cur)
    search = to_canonical(s.prev, cur)
    if ranges is not None:
        prev, search = crop_range(prev, ranges), crop_range(search, ranges)
    target = rtm_between(cur, box_to_canonical(s.prev_box, s.ref_box))
    return TrainSample(prev, search, s.size, target, s.gt_box, s.prev_box, s.gt_box)


def flip_augment(s: TrainSample, rng, ranges=None, p: float = 0.5) -> TrainSample:
    """Horizontal then temporal flip, each with probability ``p``."""
    do_h, do_t = rng.uniform(size=2) < p
    if do_h:
        s = hflip(s)
    if do_t:
        s = tflip(s, ranges)
    return s


def sample_pairs(data) -> list:
    return [(i, t) for i, seq in enumerate(data) for t in range(1, len(seq))]


def epoch_samples(data, epoch: int, cfg: TrainConfig, ranges) -> list:
    """All training pairs of one epoch, shuffled and augmented from a per-epoch RNG."""
    rng = np.random.default_rng([cfg.seed, epoch])
    pairs = sample_pairs(data)
    order = rng.permutation(len(pairs))
    out = []
    for k in order:
        i, t = pairs[k]
        s = make_sample(data[i], t, rng, cfg, ranges)
        if cfg.flip:
            s = flip_augment(s, rng, ranges)
        out.append(s)
    return out


def batch_loss(samples, params, mcfg: ModelConfig):
    mu, logb = model_forward([s.prev for s in samples], [s.search for s in samples],
                             [s.size for s in samples], params, mcfg)
    targets = np.array([s.target.to_array() for s in samples])
    return laplace_nll(mu, logb, targets)


def train_step(samples, params, opt: AdamW, mcfg: ModelConfig, micro_batch: int) -> float:
    """One optimizer step over ``samples`` with gradient accumulation; returns the mean loss."""
    opt.zero_grad()
    n = len(samples)
    total = 0.0
    for s in range(0, n, micro_batch):
        chunk = samples[s: s + micro_batch]
        loss = batch_loss(chunk, params, mcfg)
        w = len(chunk) / n
        # scale the micro-batch mean so accumulated grads equal the full-batch mean
        backward(scale(loss, w))
        total += float(loss.data) * w
    opt.step()
    return total


def _records(params, opt, epoch, history):
    rec = {f"param/{k}": p.data for k, p in params.items()}
    rec.update(opt.state_records())
    rec["train/epoch"] = np.array(float(epoch))
    rec["train/history"] = np.asarray(history, dtype=np.float64)
    return rec


def load_params(path_or_records, mcfg: ModelConfig) -> dict:
    rec = path_or_records if isinstance(path_or_records, dict) else load_checkpoint(path_or_records)
    params = init_params(mcfg)
    for k, p in params.items():
        arr = rec[f"param/{k}"]
        if arr.shape != p.data.shape:
            raise ValueError(f"checkpoint tensor {k} has shape {arr.shape}, model expects {p.data.shape}")
        p.data = arr.copy()
    return params


def train(data, cfg: TrainConfig, mcfg: ModelConfig, out: str | None = None,
          resume: str | None = None, params: dict | None = None, callback=None):
    """Optimize the model on ``data`` (list of sequences).

    Returns ``(params, step_losses, epoch_losses)``. When ``out`` is given a
    checkpoint is written there after every epoch together with
    ``<out>.loss.csv``. ``resume`` continues from such a checkpoint.
    """
    if not data or not sample_pairs(data):
        raise EmptyDataset("no training pairs (need a sequence with at least two frames)")
    ranges = mcfg.voxels.ranges
    params = params if params is not None else init_params(mcfg)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list = []
    start = 0
    if resume is not None:
        rec = load_checkpoint(resume)
        params.update(load_params(rec, mcfg))
        opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        opt.load_state_records(rec)
        start = int(rec["train/epoch"])
        history = list(rec["train/history"])
    epoch_losses = []
    total = total_steps(data, cfg)
    # workers > 1: build the next epoch's pairs in the background; each epoch
    # has its own RNG, so the result does not depend on timing
    pool = ThreadPoolExecutor(max_workers=1) if cfg.workers > 1 else None
    pending = None
    try:
        for epoch in range(start, cfg.epochs):
            samples = pending.result() if pending is not None else epoch_samples(data, epoch, cfg, ranges)
            pending = None
            if pool is not None and epoch + 1 < cfg.epochs:
                pending = pool.submit(epoch_samples, data, epoch + 1, cfg, ranges)
            losses = _run_epoch(samples, params, opt, mcfg, cfg, len(history), total, callback)
            history.extend(losses)
            epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
            log.info("epoch %d: mean loss %.4f", epoch + 1, epoch_losses[-1])
            if out is not None:
                save_checkpoint(out, _records(params, opt, epoch + 1, history))
                write_loss_csv(out + ".loss.csv", history)
            if cfg.max_steps is not None and len(history) >= cfg.max_steps:
                break
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
    return params, history, epoch_losses


def _run_epoch(samples, params, opt, mcfg, cfg: TrainConfig, steps: int, total: int, callback) -> list:
    losses = []
    for b in range(0, len(samples), cfg.batch_size):
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
        opt.lr = learning_rate(cfg, steps, total)
        losses.append(train_step(samples[b: b + cfg.batch_size], params, opt, mcfg, cfg.micro_batch))
        steps += 1
        if callback is not None:
            callback(steps, losses[-1])
    return losses


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(history, 1):
            w.writerow([i, format(float(v), ".17g")])


def read_loss_csv(path) -> list:
    with open(path, newline="") as f:
        return [float(r["loss"]) for r in csv.DictReader(f)]


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["motion_sigma"] = list(cfg.motion_sigma)
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    unknown = set(d) - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**d)
