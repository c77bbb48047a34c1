"""One-pass evaluation: Success (IoU AUC) and Precision (center-distance AUC)."""
from __future__ import annotations

import csv

import numpy as np

from .errors import EmptyInput, LengthMismatch
from .geometry import center_distance, iou3d

# 21-point grids; k / n is correctly rounded, so 0.3 is the double nearest 0.3
# (linspace gives 0.30000000000000004 and an IoU of exactly 0.3 would miss it)
IOU_THRESHOLDS = np.arange(21) / 20.0
DIST_THRESHOLDS = np.arange(21) / 10.0


def success_curve(ious) -> np.ndarray:
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise EmptyInput("no IoU values")
    return (ious[None, :] >= IOU_THRESHOLDS[:, None]).mean(axis=1)


def precision_curve(dists) -> np.ndarray:
    dists = np.asarray(dists, dtype=np.float64)
    if dists.size == 0:
        raise EmptyInput("no distances")
    return (dists[None, :] <= DIST_THRESHOLDS[:, None]).mean(axis=1)


def success(ious) -> float:
    """Mean over IoU thresholds 0, 0.05, ..., 1 of the fraction of frames with IoU >= threshold."""
    return float(success_curve(ious).mean())


def precision(dists) -> float:
    """Mean over distance thresholds 0, 0.1, ..., 2 m of the fraction of frames within it."""
    return float(precision_curve(dists).mean())


def frame_errors(preds, gts, skip_first_frame=False, bev_distance=False):
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions for {len(gts)} ground-truth boxes")
    start = 1 if skip_first_frame else 0
    ious = [iou3d(p, g) for p, g in zip(preds[start:], gts[start:])]
    dists = [center_distance(p, g, bev=bev_distance) for p, g in zip(preds[start:], gts[start:])]
    return ious, dists


def evaluate(preds: dict, gts: dict, skip_first_frame=False, bev_distance=False, frame_filter=None) -> dict:
    """Per-sequence and frame-pooled Success/Precision.

    ``preds`` and ``gts`` map sequence names to box lists. ``frame_filter``,
    if given, is called as ``frame_filter(name, t, gt_box)`` and frames for
    which it returns False are left out.
    """
    if set(preds) != set(gts):
        raise LengthMismatch("prediction and ground-truth sequences differ")
    report = {"sequences": {}}
    all_ious, all_dists = [], []
    for name in gts:
        ious, dists = frame_errors(preds[name], gts[name], skip_first_frame, bev_distance)
        if frame_filter is not None:
            start = 1 if skip_first_frame else 0
            keep = [frame_filter(name, t, g) for t, g in enumerate(gts[name][start:], start)]
            ious = [v for v, k in zip(ious, keep) if k]
            dists = [v for v, k in zip(dists, keep) if k]
        if ious:
            report["sequences"][name] = {"frames": len(ious), "success": success(ious),
                                         "precision": precision(dists)}
        all_ious += ious
        all_dists += dists
    report["frames"] = len(all_ious)
    report["success"] = success(all_ious)
    report["precision"] = precision(all_dists)
    report["success_curve"] = success_curve(all_ious).tolist()
    report["precision_curve"] = precision_curve(all_dists).tolist()
    return report


def write_curve_csv(path, thresholds, ratios) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "ratio"])
        for t, r in zip(thresholds, ratios):
            w.writerow([format(float(t), ".17g"), format(float(r), ".17g")])


def read_curve_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return np.array([float(r["threshold"]) for r in rows]), np.array([float(r["ratio"]) for r in rows])
