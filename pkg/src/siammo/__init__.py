"""Siamese motion-centric 3D single-object tracking on LiDAR point clouds, in numpy."""
from .errors import (EmptyDataset, EmptyInput, FrameOutOfRange, LengthMismatch, MalformedFile,
                     NonScalarLoss, ShapeMismatch, SiamMoError)
from .evaluator import evaluate, precision, success
from .geometry import Box3D, MotionVector, apply_rtm, iou3d, rtm_between
from .network import ModelConfig, init_params, model_forward, predict
from .pointcloud_io import Sequence, SynthConfig, load_kitti_tracks, synth_sequence
from .tracker import track_sequence, track_zero_motion
from .trainer import DESK_TRAIN, TrainConfig, train

__version__ = "0.1.0"
