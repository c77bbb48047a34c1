"""Oriented-box algebra on yaw-only (gravity-aligned) 3D boxes.

Conventions: the up-axis is z, yaw is a counter-clockwise rotation about it,
and a box's local x-axis is its heading. ``w``, ``l`` and ``h`` are the
extents along the box's local x, y and z axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AREA_EPS = 1e-12


def normalize_angle(a):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    # in-range values pass through untouched so re-normalizing is exact
    inside = (a > -np.pi) & (a <= np.pi)
    out = np.where(inside, a, np.pi - np.mod(np.pi - a, 2.0 * np.pi))
    if np.ndim(out) == 0:
        return float(out)
    return out


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    w: float
    l: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got {(self.w, self.l, self.h)}")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.w, self.l, self.h])

    @property
    def volume(self) -> float:
        return self.w * self.l * self.h

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw])

    @classmethod
    def from_array(cls, a) -> "Box3D":
        a = [float(v) for v in a]
        return cls(*a)

    def with_pose(self, center, yaw: float) -> "Box3D":
        return Box3D(float(center[0]), float(center[1]), float(center[2]),
                     self.w, self.l, self.h, yaw)


@dataclass(frozen=True)
class MotionVector:
    """Relative target motion, expressed in the previous box's canonical frame."""

    dx: float
    dy: float
    dz: float
    dyaw: float

    def __post_init__(self):
        object.__setattr__(self, "dyaw", normalize_angle(self.dyaw))

    def to_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dyaw])

    @classmethod
    def from_array(cls, a) -> "MotionVector":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class RigidPose:
    """Yaw-only rotation followed by a translation: x -> R(yaw) x + t."""

    yaw: float
    translation: tuple

    @classmethod
    def of_box(cls, box: Box3D) -> "RigidPose":
        return cls(box.yaw, (box.cx, box.cy, box.cz))

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(0.0, (0.0, 0.0, 0.0))

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return p @ yaw_matrix(self.yaw).T + np.asarray(self.translation)

    def inverse(self) -> "RigidPose":
        t = -(yaw_matrix(-self.yaw) @ np.asarray(self.translation))
        return RigidPose(-self.yaw, tuple(t))

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first."""
        t = yaw_matrix(self.yaw) @ np.asarray(other.translation) + np.asarray(self.translation)
        return RigidPose(self.yaw + other.yaw, tuple(t))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = yaw_matrix(self.yaw)
        m[:3, 3] = self.translation
        return m


def box_corners(b: Box3D) -> np.ndarray:
    """Return the 8 corners (8x3), bottom face counter-clockwise then top face."""
    hw, hl, hh = b.w / 2, b.l / 2, b.h / 2
    local = np.array([
        [-hw, -hl, -hh], [hw, -hl, -hh], [hw, hl, -hh], [-hw, hl, -hh],
        [-hw, -hl, hh], [hw, -hl, hh], [hw, hl, hh], [-hw, hl, hh],
    ])
    return local @ yaw_matrix(b.yaw).T + b.center


def bev_corners(b: Box3D) -> np.ndarray:
    return box_corners(b)[:4, :2]


def to_canonical(points, ref: Box3D) -> np.ndarray:
    """Express world points in ``ref``'s frame (center at origin, zero yaw)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    # row-vector form of R(-yaw) (p - c)
    return (p - ref.center) @ yaw_matrix(ref.yaw)


def from_canonical(points, ref: Box3D) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return p @ yaw_matrix(ref.yaw).T + ref.center


def box_to_canonical(box: Box3D, ref: Box3D) -> Box3D:
    c = to_canonical(box.center, ref)[0]
    return box.with_pose(c, box.yaw - ref.yaw)


def box_from_canonical(box: Box3D, ref: Box3D) -> Box3D:
    c = from_canonical(box.center, ref)[0]
    return box.with_pose(c, box.yaw + ref.yaw)


def apply_rtm(prev: Box3D, m: MotionVector) -> Box3D:
    """Advance ``prev`` by a motion given in its own canonical frame. Size is kept."""
    if m.dx == 0.0 and m.dy == 0.0 and m.dz == 0.0 and m.dyaw == 0.0:
        return prev
    d = yaw_matrix(prev.yaw) @ np.array([m.dx, m.dy, m.dz])
    return prev.with_pose(prev.center + d, prev.yaw + m.dyaw)


def rtm_between(prev: Box3D, cur: Box3D) -> MotionVector:
    """Motion that takes ``prev`` to ``cur``'s pose, so ``apply_rtm(prev, m)`` matches ``cur``."""
    c = to_canonical(cur.center, prev)[0]
    return MotionVector(c[0], c[1], c[2], cur.yaw - prev.yaw)


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    out.append(_intersect(prev, cur, s_prev, s_cur))
                out.append(cur)
            elif s_prev >= 0:
                out.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    area = polygon_area(clip_polygon(bev_corners(a), bev_corners(b)))
    return area if area >= AREA_EPS else 0.0


def vertical_overlap(a: Box3D, b: Box3D) -> float:
    lo = max(a.cz - a.h / 2, b.cz - b.h / 2)
    hi = min(a.cz + a.h / 2, b.cz + b.h / 2)
    return max(0.0, hi - lo)


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU of two gravity-aligned oriented boxes."""
    dz = vertical_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


def center_distance(a: Box3D, b: Box3D, bev: bool = False) -> float:
    d = a.center - b.center
    if bev:
        d = d[:2]
    return float(np.sqrt(np.dot(d, d)))


def points_in_box(points, box: Box3D, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside ``box`` inflated by ``margin`` on every side."""
    local = to_canonical(points, box)
    half = box.size / 2 + margin
    return np.all(np.abs(local) <= half, axis=1)
