"""Point-cloud ingestion: KITTI tracking files, synthetic sequences, range cropping.

Point clouds are plain ``(N, 3)`` float64 arrays of metric x, y, z.
"""
from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import MalformedFile
from .geometry import Box3D, from_canonical, points_in_box

# Car/Van range at paper scale
CAR_RANGE = ((-4.8, 4.8), (-4.8, 4.8), (-1.5, 1.5))


@dataclass
class Sequence:
    frames: list
    gt_boxes: list
    category: str = "Car"
    name: str = "seq"

    def __post_init__(self):
        if len(self.frames) != len(self.gt_boxes):
            raise ValueError("frames and gt_boxes must have the same length")
        if len(self.frames) < 2:
            raise ValueError("a sequence needs at least two frames")

    def __len__(self):
        return len(self.frames)


# ---------------------------------------------------------------------------
# KITTI


def parse_velodyne(data: bytes) -> np.ndarray:
    """Decode a velodyne ``.bin`` payload into an ``(N, 3)`` array (intensity dropped)."""
    if len(data) % 16 != 0:
        raise MalformedFile(f"velodyne payload of {len(data)} bytes is not a multiple of 16")
    raw = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    if not np.all(np.isfinite(raw)):
        raise MalformedFile("velodyne payload contains non-finite values")
    return raw[:, :3].astype(np.float64)


def serialize_velodyne(points, intensity=None) -> bytes:
    p = np.asarray(points, dtype="<f4").reshape(-1, 3)
    rec = np.zeros((len(p), 4), dtype="<f4")
    rec[:, :3] = p
    if intensity is not None:
        rec[:, 3] = np.asarray(intensity, dtype="<f4")
    return rec.tobytes()


def read_velodyne(path) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_velodyne(f.read())


def parse_calib(calib_text: str) -> dict:
    """Parse ``key: values`` (or ``key values``) calibration lines into float arrays."""
    out = {}
    for line in calib_text.splitlines():
        line = line.strip()
        if not line:
            continue
        if ":" in line.split()[0]:
            key, _, rest = line.partition(":")
        else:
            key, _, rest = line.partition(" ")
        try:
            out[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError as e:
            raise MalformedFile(f"non-numeric calibration value in line {line!r}") from e
    return out


def velo_to_rect_matrix(calib: dict) -> np.ndarray:
    """4x4 map from LiDAR to rectified camera coordinates."""
    r_key = "R_rect" if "R_rect" in calib else "R0_rect"
    t_key = "Tr_velo_cam" if "Tr_velo_cam" in calib else "Tr_velo_to_cam"
    if r_key not in calib or t_key not in calib:
        raise MalformedFile("calibration is missing R_rect or Tr_velo_cam")
    if calib[r_key].size != 9 or calib[t_key].size != 12:
        raise MalformedFile("R_rect needs 9 values and Tr_velo_cam needs 12")
    r = np.eye(4)
    r[:3, :3] = calib[r_key].reshape(3, 3)
    t = np.eye(4)
    t[:3, :] = calib[t_key].reshape(3, 4)
    return r @ t


def parse_tracklets(label_text: str, calib_text: str) -> dict:
    """Parse a KITTI tracking ``label_02`` file into LiDAR-frame tracks.

    Returns a mapping ``track_id -> [(frame, Box3D), ...]`` ordered by frame.
    ``DontCare`` rows are dropped. The returned boxes use this package's
    convention, so ``Box3D.w`` holds KITTI's length (extent along the heading).
    """
    rect_to_velo = np.linalg.inv(velo_to_rect_matrix(parse_calib(calib_text)))
    tracks: dict = {}
    for lineno, line in enumerate(label_text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) < 17:
            raise MalformedFile(f"label line {lineno} has {len(fields)} fields, expected 17")
        if fields[2] == "DontCare":
            continue
        try:
            frame, track_id = int(fields[0]), int(fields[1])
            h, w, l, x, y, z, ry = (float(v) for v in fields[10:17])
        except ValueError as e:
            raise MalformedFile(f"non-numeric field in label line {lineno}") from e
        # camera y points down: lift from bottom center to geometric center
        center = rect_to_velo @ np.array([x, y - h / 2, z, 1.0])
        box = Box3D(center[0], center[1], center[2], l, w, h, -ry - math.pi / 2)
        tracks.setdefault(track_id, []).append((frame, box))
    for v in tracks.values():
        v.sort(key=lambda fb: fb[0])
    return tracks


def track_types(label_text: str) -> dict:
    types = {}
    for line in label_text.splitlines():
        fields = line.split()
        if len(fields) >= 3 and fields[2] != "DontCare":
            types[int(fields[1])] = fields[2]
    return types


def load_kitti_tracks(root, seq_id: str, category: str | None = None) -> list:
    """Build one :class:`Sequence` per track of a KITTI tracking sequence.

    ``root`` holds ``velodyne/<seq_id>/NNNNNN.bin``, ``label_02/<seq_id>.txt``
    and ``calib/<seq_id>.txt``. Tracks shorter than two frames are skipped.
    """
    with open(os.path.join(root, "label_02", f"{seq_id}.txt")) as f:
        label_text = f.read()
    with open(os.path.join(root, "calib", f"{seq_id}.txt")) as f:
        calib_text = f.read()
    tracks = parse_tracklets(label_text, calib_text)
    types = track_types(label_text)
    clouds: dict = {}
    out = []
    for tid, entries in sorted(tracks.items()):
        if category is not None and types[tid] != category:
            continue
        if len(entries) < 2:
            continue
        frames = []
        for frame, _ in entries:
            if frame not in clouds:
                clouds[frame] = read_velodyne(
                    os.path.join(root, "velodyne", seq_id, f"{frame:06d}.bin"))
            frames.append(clouds[frame])
        out.append(Sequence(frames, [b for _, b in entries], types[tid], f"{seq_id}_{tid}"))
    return out


# ---------------------------------------------------------------------------
# cropping


def crop_range(points, ranges) -> np.ndarray:
    """Keep points with ``lo <= coord < hi`` on every axis, preserving order."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keep = np.ones(len(p), dtype=bool)
    for axis, (lo, hi) in enumerate(ranges):
        if not lo < hi:
            raise ValueError(f"empty range on axis {axis}: {(lo, hi)}")
        keep &= (p[:, axis] >= lo) & (p[:, axis] < hi)
    return p[keep]


# ---------------------------------------------------------------------------
# synthetic sequences


@dataclass
class SynthConfig:
    n_frames: int = 30
    density: float = 12.0  # points per square meter of box surface
    motion_sigma: tuple = (0.3, 0.2, 0.1)
    yaw_rate: tuple = (-math.radians(5.0), math.radians(5.0))
    n_clutter: int = 60
    seed: int = 0
    box_size: tuple = (3.9, 1.6, 1.5)
    jitter: float = 0.02
    clutter_range: tuple = CAR_RANGE
    category: str = "Car"

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be at least 2")
        if self.density < 0 or self.n_clutter < 0:
            raise ValueError("densities must be non-negative")


def sample_box_surface(box: Box3D, density: float, jitter: float, rng) -> np.ndarray:
    """Uniform samples on the six faces of ``box`` with uniform +-jitter noise (world frame)."""
    hw, hl, hh = box.w / 2, box.l / 2, box.h / 2
    half = np.array([hw, hl, hh])
    chunks = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        area = 4 * half[u] * half[v]
        n = int(round(density * area))
        for sign in (-1.0, 1.0):
            pts = np.empty((n, 3))
            pts[:, axis] = sign * half[axis]
            pts[:, u] = rng.uniform(-half[u], half[u], n)
            pts[:, v] = rng.uniform(-half[v], half[v], n)
            chunks.append(pts)
    local = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    if jitter > 0:
        local = local + rng.uniform(-jitter, jitter, local.shape)
    return from_canonical(local, box)


def sample_clutter(box: Box3D, n: int, ranges, rng, margin: float = 0.1) -> np.ndarray:
    """``n`` uniform points in ``ranges`` around ``box`` (its canonical frame), none inside it."""
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    inflated = Box3D(0.0, 0.0, 0.0, box.w + 2 * margin, box.l + 2 * margin, box.h + 2 * margin)
    out = np.zeros((0, 3))
    while len(out) < n:
        cand = rng.uniform(lo, hi, (2 * (n - len(out)) + 8, 3))
        cand = cand[~points_in_box(cand, inflated)]
        out = np.concatenate([out, cand])
    return from_canonical(out[:n], box)


def synth_sequence(cfg: SynthConfig) -> Sequence:
    """Random-walk a box and scan its surface plus background clutter each frame."""
    rng = np.random.default_rng(cfg.seed)
    w, l, h = cfg.box_size
    box = Box3D(rng.uniform(-20, 20), rng.uniform(-20, 20), 0.0, w, l, h,
                rng.uniform(-math.pi, math.pi))
    sigma = np.asarray(cfg.motion_sigma, dtype=np.float64)
    boxes, frames = [], []
    for t in range(cfg.n_frames):
        if t > 0:
            step = rng.normal(0.0, 1.0, 3) * sigma
            dyaw = rng.uniform(*cfg.yaw_rate) if cfg.yaw_rate[1] > cfg.yaw_rate[0] else cfg.yaw_rate[0]
            box = box.with_pose(box.center + step, box.yaw + dyaw)
        surface = sample_box_surface(box, cfg.density, cfg.jitter, rng)
        clutter = sample_clutter(box, cfg.n_clutter, cfg.clutter_range, rng)
        boxes.append(box)
        frames.append(np.concatenate([surface, clutter]))
    return Sequence(frames, boxes, cfg.category, f"synth_{cfg.seed}")


# ---------------------------------------------------------------------------
# synthetic sequence dump
#
#   siammo-sequence 1
#   sequence <name> <category> <n_frames>
#   frame <index> <cx> <cy> <cz> <w> <l> <h> <yaw> <n_points>
#   <x> <y> <z>            (n_points lines)
#
# Floats are written with 17 significant digits so reading is exact.

SEQ_MAGIC = "siammo-sequence 1"


def _f(v) -> str:
    return format(float(v), ".17g")


def dump_sequences(seqs, f) -> None:
    f.write(SEQ_MAGIC + "\n")
    for seq in seqs:
        f.write(f"sequence {seq.name} {seq.category} {len(seq)}\n")
        for t, (pts, box) in enumerate(zip(seq.frames, seq.gt_boxes)):
            f.write(f"frame {t} " + " ".join(_f(v) for v in box.to_array()) + f" {len(pts)}\n")
            for p in pts:
                f.write(f"{_f(p[0])} {_f(p[1])} {_f(p[2])}\n")


def dumps_sequences(seqs) -> str:
    buf = io.StringIO()
    dump_sequences(seqs, buf)
    return buf.getvalue()


def load_sequences(f) -> list:
    lines = iter(f.read().splitlines())
    header = next(lines, "")
    if header.strip() != SEQ_MAGIC:
        raise MalformedFile(f"not a sequence dump (header {header!r})")
    seqs = []
    try:
        for line in lines:
            if not line.strip():
                continue
            tag, name, category, n = line.split()
            if tag != "sequence":
                raise MalformedFile(f"expected a sequence record, got {line!r}")
            frames, boxes = [], []
            for t in range(int(n)):
                rec = next(lines).split()
                if rec[0] != "frame" or int(rec[1]) != t:
                    raise MalformedFile(f"bad frame record {rec[:2]}")
                boxes.append(Box3D.from_array(rec[2:9]))
                npts = int(rec[9])
                pts = np.array([next(lines).split() for _ in range(npts)], dtype=np.float64)
                frames.append(pts.reshape(-1, 3))
            seqs.append(Sequence(frames, boxes, category, name))
    except (StopIteration, ValueError) as e:
        if isinstance(e, MalformedFile):
            raise
        raise MalformedFile(f"truncated or malformed sequence dump: {e}") from e
    return seqs


def save_sequences(path, seqs) -> None:
    with open(path, "w") as f:
        dump_sequences(seqs, f)


def read_sequences(path) -> list:
    with open(path) as f:
        return load_sequences(f)


def bundled_kitti_root() -> str:
    """Directory of the three-frame KITTI-format sample shipped with the package."""
    return str(resources.files("siammo") / "data" / "kitti_mini")
