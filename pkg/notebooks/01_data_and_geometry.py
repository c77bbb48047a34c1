"""
Synthetic sequences, canonical frames and voxels
================================================

A walk through the data side of the tracker: generate a sequence, look at one
frame pair in the canonical frame of the previous box, voxelize it and check
the motion target. Runs in a couple of seconds.
"""

# %%
import math

import numpy as np

from siammo.geometry import Box3D, apply_rtm, iou3d, rtm_between, to_canonical
from siammo.pointcloud_io import SynthConfig, crop_range, synth_sequence
from siammo.voxelizer import DESK_VOXELS, voxelize_with_counts

seq = synth_sequence(SynthConfig(n_frames=30, seed=7))
print(len(seq), "frames,", [len(f) for f in seq.frames[:5]], "points in the first five")
print("first box:", seq.gt_boxes[0])

# %%
# Motion between consecutive boxes, expressed in the earlier box's frame.
# apply_rtm undoes rtm_between.
b0, b1 = seq.gt_boxes[0], seq.gt_boxes[1]
m = rtm_between(b0, b1)
print("motion:", np.round(m.to_array(), 3), " yaw change in degrees:", round(math.degrees(m.dyaw), 2))
print("round trip error:", np.abs(apply_rtm(b0, m).to_array() - b1.to_array()).max())

# %%
# In the canonical frame of b0 the target sits at the origin facing +x.
prev = crop_range(to_canonical(seq.frames[0], b0), DESK_VOXELS.ranges)
search = crop_range(to_canonical(seq.frames[1], b0), DESK_VOXELS.ranges)
print("prev cloud centroid :", np.round(prev.mean(0), 2))
print("search cloud extent :", np.round(search.min(0), 2), np.round(search.max(0), 2))

# %%
# Voxel means: each active voxel keeps the mean of its points.
vox, counts = voxelize_with_counts([search], DESK_VOXELS)
print(len(vox), "active voxels of", np.prod(DESK_VOXELS.grid_shape), "on a", DESK_VOXELS.grid_shape, "grid")
print("points per voxel: max", counts.max(), "mean", round(counts.mean(), 2))
print("sum of means x counts equals sum of points:",
      np.allclose((vox.feats.data * counts[:, None]).sum(0), search.sum(0)))

# %%
# Rotated IoU: a unit cube against itself turned by 45 degrees.
cube = Box3D(0, 0, 0, 1, 1, 1)
print("IoU at 45 deg:", iou3d(cube, Box3D(0, 0, 0, 1, 1, 1, math.pi / 4)), "vs 1/sqrt(2) =", 1 / math.sqrt(2))
print("IoU of consecutive GT boxes:", [round(iou3d(a, b), 3) for a, b in zip(seq.gt_boxes[:5], seq.gt_boxes[1:6])])
