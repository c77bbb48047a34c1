"""Frame-by-frame tracking by chaining predicted relative motions."""
from __future__ import annotations

import csv
import time

import numpy as np

from .geometry import Box3D, MotionVector, apply_rtm, to_canonical
from .network import ModelConfig, predict
from .pointcloud_io import crop_range


def track_sequence(params, cfg: ModelConfig, seq, b1: Box3D | None = None, timings: list | None = None) -> list:
    """Track from the first-frame box ``b1`` (defaults to the sequence's first GT box).

    Each step canonicalizes frames ``t - 1`` and ``t`` w.r.t. the last
    prediction, crops to the voxel range, predicts the motion and advances the
    box. When ``timings`` is a list, one ``(preprocess_ms, forward_ms)`` tuple
    is appended per tracked frame.
    """
    b1 = seq.gt_boxes[0] if b1 is None else b1
    ranges = cfg.voxels.ranges
    size = b1.size
    preds = [b1]
    for t in range(1, len(seq)):
        ref = preds[-1]
        t0 = time.perf_counter()
        prev = crop_range(to_canonical(seq.frames[t - 1], ref), ranges)
        search = crop_range(to_canonical(seq.frames[t], ref), ranges)
        t1 = time.perf_counter()
        mu = predict(prev, search, size, params, cfg)
        t2 = time.perf_counter()
        preds.append(apply_rtm(ref, MotionVector.from_array(mu)))
        if timings is not None:
            timings.append(((t1 - t0) * 1e3, (t2 - t1) * 1e3))
    return preds


def track_zero_motion(seq, b1: Box3D | None = None) -> list:
    """Baseline that never moves the first box."""
    b1 = seq.gt_boxes[0] if b1 is None else b1
    return [b1] * len(seq)


BOX_FIELDS = ["cx", "cy", "cz", "w", "l", "h", "yaw"]


def write_boxes_csv(path, boxes_by_seq: dict) -> None:
    """Rows of ``sequence, frame, cx, cy, cz, w, l, h, yaw``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sequence", "frame"] + BOX_FIELDS)
        for name, boxes in boxes_by_seq.items():
            for t, b in enumerate(boxes):
                w.writerow([name, t] + [format(float(v), ".17g") for v in b.to_array()])


def read_boxes_csv(path) -> dict:
    out: dict = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.setdefault(row["sequence"], []).append(
                (int(row["frame"]), Box3D.from_array([row[k] for k in BOX_FIELDS])))
    return {k: [b for _, b in sorted(v, key=lambda fb: fb[0])] for k, v in out.items()}


# ---------------------------------------------------------------------------
# timing report: one row per tracked frame, then the means


BENCH_FIELDS = ["sequence", "frame", "preprocess_ms", "forward_ms", "total_ms"]


def bench_summary(rows) -> dict:
    pre = np.array([r[2] for r in rows], dtype=np.float64)
    fwd = np.array([r[3] for r in rows], dtype=np.float64)
    total = pre + fwd
    mean_total = float(total.mean()) if len(total) else float("nan")
    return {"frames": len(rows), "preprocess_ms": float(pre.mean()) if len(pre) else float("nan"),
            "forward_ms": float(fwd.mean()) if len(fwd) else float("nan"), "total_ms": mean_total,
            "fps": 1000.0 / mean_total if mean_total > 0 else float("nan")}


def bench_sequences(params, cfg: ModelConfig, seqs) -> list:
    """``(sequence, frame, preprocess_ms, forward_ms)`` for every tracked frame."""
    rows = []
    for seq in seqs:
        timings: list = []
        track_sequence(params, cfg, seq, timings=timings)
        rows += [(seq.name, t, pre, fwd) for t, (pre, fwd) in enumerate(timings, 1)]
    return rows


def write_bench_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(BENCH_FIELDS)
        for name, t, pre, fwd in rows:
            w.writerow([name, t] + [format(float(v), ".17g") for v in (pre, fwd, pre + fwd)])


def read_bench_csv(path) -> list:
    with open(path, newline="") as f:
        return [(r["sequence"], int(r["frame"]), float(r["preprocess_ms"]), float(r["forward_ms"]))
                for r in csv.DictReader(f)]
