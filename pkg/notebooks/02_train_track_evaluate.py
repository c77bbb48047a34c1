"""
Train, track and score at desk scale
====================================

A short training run (about a minute on one CPU core), then one-pass
evaluation against the zero-motion baseline and the per-threshold curves.
Set EPOCHS = 30 to reproduce the full desk preset.
"""

# %%
import time

import numpy as np

from siammo.evaluator import DIST_THRESHOLDS, IOU_THRESHOLDS, evaluate
from siammo.network import ModelConfig, count_parameters, init_params
from siammo.pointcloud_io import SynthConfig, synth_sequence
from siammo.tracker import bench_sequences, bench_summary, track_sequence, track_zero_motion
from siammo.trainer import DESK_TRAIN, TrainConfig, train

EPOCHS = 6

train_data = [synth_sequence(SynthConfig(seed=s)) for s in range(20)]
test_data = [synth_sequence(SynthConfig(seed=1000 + s)) for s in range(5)]
mcfg = ModelConfig()
print("parameter tensors, scalars:", count_parameters(init_params(mcfg)))

# %%
t0 = time.perf_counter()
params, steps, epochs = train(train_data, TrainConfig(**dict(DESK_TRAIN, epochs=EPOCHS)), mcfg)
print(f"{len(steps)} steps in {time.perf_counter() - t0:.0f} s")
print("mean loss per epoch:", np.round(epochs, 3))

# %%
gts = {s.name: s.gt_boxes for s in test_data}
model = evaluate({s.name: track_sequence(params, mcfg, s) for s in test_data}, gts)
still = evaluate({s.name: track_zero_motion(s) for s in test_data}, gts)
print(f"model        Success {model['success']:.3f}  Precision {model['precision']:.3f}")
print(f"zero motion  Success {still['success']:.3f}  Precision {still['precision']:.3f}")

# %%
# The curves behind the two numbers (what a plot would show).
for name, th, curve in (("IoU", IOU_THRESHOLDS, model["success_curve"]),
                        ("dist", DIST_THRESHOLDS, model["precision_curve"])):
    print(name.ljust(5), " ".join(f"{t:.2f}:{v:.2f}" for t, v in list(zip(th, curve))[::4]))

# %%
s = bench_summary(bench_sequences(params, mcfg, test_data[:1]))
print(f"preprocess {s['preprocess_ms']:.1f} ms, forward {s['forward_ms']:.1f} ms, {s['fps']:.1f} FPS")
