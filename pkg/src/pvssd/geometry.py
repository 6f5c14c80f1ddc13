"""Oriented box geometry in the LiDAR frame.

Boxes are ``(x, y, z, w, l, h, yaw)``: ``w`` spans the box-local x axis and
``l`` the box-local y axis, so at ``yaw = 0`` a box's length runs along the
LiDAR y axis. ``yaw`` rotates counter-clockwise about +z.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap an angle into ``[-pi, pi)``."""
    t = math.fmod(theta + math.pi, TWO_PI)
    if t < 0.0:
        t += TWO_PI
    t -= math.pi
    # fmod rounding can land exactly on +pi
    if t >= math.pi:
        t -= TWO_PI
    return t


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got w={self.w} l={self.l} h={self.h}")
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Box3D":
        return cls(*(float(v) for v in a[:7]))

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.yaw])

    @property
    def diagonal(self) -> float:
        return math.hypot(self.w, self.l)


@dataclass(frozen=True)
class RangeSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        for lo, hi, axis in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y"),
                             (self.z_min, self.z_max, "z")):
            if not lo < hi:
                raise ValueError(f"range on {axis} must satisfy min < max, got [{lo}, {hi}]")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max, self.z_max])

    @property
    def extent(self) -> np.ndarray:
        return self.upper - self.lower


KITTI_RANGE = RangeSpec(0.0, 60.8, -30.4, 30.4, -3.0, 1.0)


def _as_box(b) -> Box3D:
    return b if isinstance(b, Box3D) else Box3D.from_array(b)


def box_corners_bev(box) -> np.ndarray:
    """Four planar corners ``(4, 2)`` in counter-clockwise order."""
    b = _as_box(box)
    hw, hl = b.w / 2.0, b.l / 2.0
    local = np.array([[-hw, -hl], [hw, -hl], [hw, hl], [-hw, hl]])
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([b.x, b.y])


def polygon_area(poly) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def clip_convex(subject: list, clip: list, eps: float = 1e-12) -> list:
    """Sutherland-Hodgman clipping of ``subject`` by a CCW convex ``clip`` polygon."""
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        m = len(inp)
        for j in range(m):
            px, py = inp[j - 1]
            qx, qy = inp[j]
            dp = ex * (py - ay) - ey * (px - ax)
            dq = ex * (qy - ay) - ey * (qx - ax)
            p_in = dp >= -eps
            q_in = dq >= -eps
            if q_in:
                if not p_in:
                    t = dp / (dp - dq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif p_in:
                t = dp / (dp - dq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def bev_intersection_area(a, b) -> float:
    ca = [tuple(p) for p in box_corners_bev(a)]
    cb = [tuple(p) for p in box_corners_bev(b)]
    inter = clip_convex(ca, cb)
    return max(polygon_area(inter), 0.0)


def bev_iou(a, b) -> float:
    """Rotated IoU of the planar footprints; ``z`` and ``h`` play no role."""
    a, b = _as_box(a), _as_box(b)
    # circumscribed circles disjoint => no overlap
    if math.hypot(a.x - b.x, a.y - b.y) > 0.5 * (a.diagonal + b.diagonal):
        return 0.0
    inter = bev_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.w * a.l + b.w * b.l - inter
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a, b) -> float:
    """Volumetric IoU: BEV intersection times vertical overlap over union volume."""
    a, b = _as_box(a), _as_box(b)
    top = min(a.z + a.h / 2, b.z + b.h / 2)
    bottom = max(a.z - a.h / 2, b.z - b.h / 2)
    dz = top - bottom
    if dz <= 0.0:
        return 0.0
    if math.hypot(a.x - b.x, a.y - b.y) > 0.5 * (a.diagonal + b.diagonal):
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter <= 0.0:
        return 0.0
    union = a.w * a.l * a.h + b.w * b.l * b.h - inter
    return min(max(inter / union, 0.0), 1.0)


def pairwise_bev_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """IoU matrix for ``(M, 7)`` x ``(K, 7)`` box arrays.

    Exact clipping runs only on pairs whose circumscribed circles meet, which
    keeps anchor matching tractable.
    """
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if out.size == 0:
        return out
    ra = 0.5 * np.hypot(boxes_a[:, 3], boxes_a[:, 4])
    rb = 0.5 * np.hypot(boxes_b[:, 3], boxes_b[:, 4])
    d = np.hypot(boxes_a[:, None, 0] - boxes_b[None, :, 0], boxes_a[:, None, 1] - boxes_b[None, :, 1])
    ii, jj = np.nonzero(d <= ra[:, None] + rb[None, :])
    for i, j in zip(ii.tolist(), jj.tolist()):
        out[i, j] = bev_iou(boxes_a[i], boxes_b[j])
    return out


def nms_bev(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy NMS in descending score order; equal scores keep the lower index first."""
    n = len(scores)
    if len(boxes) != n:
        raise ValueError(f"nms_bev: {len(boxes)} boxes but {n} scores")
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"nms_bev: threshold must lie in (0, 1], got {iou_threshold}")
    order = sorted(range(n), key=lambda i: (-float(scores[i]), i))
    boxes = [_as_box(b) for b in boxes]
    keep: list[int] = []
    for i in order:
        if all(bev_iou(boxes[i], boxes[k]) <= iou_threshold for k in keep):
            keep.append(i)
    return keep


def points_in_box(points: np.ndarray, box) -> np.ndarray:
    """Boolean mask of points inside ``box``; points on a face count as inside."""
    b = _as_box(box)
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    dx = pts[:, 0] - b.x
    dy = pts[:, 1] - b.y
    dz = pts[:, 2] - b.z
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    # inverse rotation into the box frame
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (np.abs(lx) <= b.w / 2) & (np.abs(ly) <= b.l / 2) & (np.abs(dz) <= b.h / 2)


def rotate_points_z(points: np.ndarray, angle: float, center: Iterable[float] = (0.0, 0.0)) -> np.ndarray:
    """Rotate xy of ``points`` about ``center`` by ``angle``; other columns untouched."""
    out = np.array(points, dtype=np.float64, copy=True)
    cx, cy = center
    c, s = math.cos(angle), math.sin(angle)
    dx = out[:, 0] - cx
    dy = out[:, 1] - cy
    out[:, 0] = c * dx - s * dy + cx
    out[:, 1] = s * dx + c * dy + cy
    return out
