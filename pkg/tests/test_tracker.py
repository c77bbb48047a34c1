import numpy as np
import pytest

from siammo.geometry import Box3D, normalize_angle, yaw_matrix
from siammo.network import ModelConfig, init_params
from siammo.pointcloud_io import Sequence, SynthConfig, synth_sequence
from siammo.tensor import Tensor
from siammo.tracker import (bench_sequences, bench_summary, read_bench_csv, read_boxes_csv, track_sequence,
                            track_zero_motion, write_bench_csv, write_boxes_csv)

CFG = ModelConfig(svfe_widths=(2, 4, 4, 4), dbfe_widths=(4, 4, 4))


@pytest.fixture(scope="module")
def params():
    return init_params(CFG)


@pytest.fixture(scope="module")
def seq():
    return synth_sequence(SynthConfig(n_frames=6, seed=11))


def test_length_and_first_box(params, seq):
    preds = track_sequence(params, CFG, seq)
    assert len(preds) == len(seq) and preds[0] == seq.gt_boxes[0]
    b1 = Box3D(1, 2, 0, 3.9, 1.6, 1.5, 0.4)
    assert track_sequence(params, CFG, seq, b1)[0] is b1


def test_zero_head_keeps_first_box(params, seq):
    p = dict(params)
    p["head.out.w"] = Tensor(np.zeros_like(params["head.out.w"].data))
    p["head.out.b"] = Tensor(np.zeros_like(params["head.out.b"].data))
    preds = track_sequence(p, CFG, seq)
    assert all(b == seq.gt_boxes[0] for b in preds)


def test_zero_motion_baseline(seq):
    assert track_zero_motion(seq) == [seq.gt_boxes[0]] * len(seq)


def test_deterministic(params, seq):
    assert track_sequence(params, CFG, seq) == track_sequence(params, CFG, seq)


def test_empty_frames_do_not_fail(params):
    box = Box3D(0, 0, 0, 3.9, 1.6, 1.5)
    s = Sequence([np.zeros((0, 3))] * 3, [box] * 3)
    preds = track_sequence(params, CFG, s)
    assert len(preds) == 3 and all(np.isfinite(b.to_array()).all() for b in preds)


def test_rigid_equivariance(params, seq):
    yaw, shift = 0.7, np.array([12.0, -3.0, 0.4])
    r = yaw_matrix(yaw)

    def move_box(b):
        return b.with_pose(r @ b.center + shift, b.yaw + yaw)

    moved = Sequence([f @ r.T + shift for f in seq.frames], [move_box(b) for b in seq.gt_boxes])
    a = [move_box(b) for b in track_sequence(params, CFG, seq)]
    b = track_sequence(params, CFG, moved)
    for x, y in zip(a, b):
        assert np.abs(x.center - y.center).max() < 1e-6
        assert abs(normalize_angle(x.yaw - y.yaw)) < 1e-6


def test_boxes_csv_round_trip(tmp_path, seq):
    boxes = {"a": seq.gt_boxes, "b": seq.gt_boxes[:2]}
    write_boxes_csv(tmp_path / "p.csv", boxes)
    assert read_boxes_csv(tmp_path / "p.csv") == boxes


def test_bench_round_trip(tmp_path, params, seq):
    rows = bench_sequences(params, CFG, [seq])
    assert len(rows) == len(seq) - 1
    assert all(pre >= 0 and fwd > 0 for _, _, pre, fwd in rows)
    write_bench_csv(tmp_path / "b.csv", rows)
    back = read_bench_csv(tmp_path / "b.csv")
    assert back == rows
    assert bench_summary(back) == bench_summary(rows)
    summary = bench_summary(rows)
    assert summary["fps"] == pytest.approx(1000.0 / summary["total_ms"])


def test_bench_summary_values():
    s = bench_summary([("a", 1, 1.0, 3.0), ("a", 2, 3.0, 5.0)])
    assert s == {"frames": 2, "preprocess_ms": 2.0, "forward_ms": 4.0, "total_ms": 6.0, "fps": 1000.0 / 6.0}
