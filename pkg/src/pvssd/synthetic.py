"""Procedural LiDAR-like scenes: a ground plane plus points on the surfaces of a few boxes."""
from __future__ import annotations

import math

import numpy as np

from .dataset import FrameAnnotation, ObjectLabel
from .geometry import Box3D, RangeSpec, bev_iou

GROUND_Z = -1.73
TEMPLATES = {
    "Car": ((1.6, 3.9, 1.56), 240),
    "Cyclist": ((0.6, 1.76, 1.73), 120),
}


def surface_points(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniformly on the four sides and the roof of ``box`` (LiDAR frame, with reflectance)."""
    w, l, h = box.w, box.l, box.h
    areas = np.array([w * h, w * h, l * h, l * h, w * l])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u, v = rng.random(n) - 0.5, rng.random(n) - 0.5
    local = np.zeros((n, 3))
    local[:, 2] = v * h
    sides = {0: (u * w, -l / 2), 1: (u * w, l / 2), 2: (-w / 2, u * l), 3: (w / 2, u * l)}
    for f, (px, py) in sides.items():
        sel = face == f
        local[sel, 0] = np.broadcast_to(px, n)[sel]
        local[sel, 1] = np.broadcast_to(py, n)[sel]
    roof = face == 4
    local[roof, 0], local[roof, 1], local[roof, 2] = u[roof] * w, v[roof] * l, h / 2
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = box.x + c * local[:, 0] - s * local[:, 1]
    y = box.y + s * local[:, 0] + c * local[:, 1]
    return np.column_stack([x, y, box.z + local[:, 2], rng.uniform(0.4, 0.9, n)])


def random_scene(rng: np.random.Generator, area: RangeSpec, n_boxes: int, classes=("Car", "Cyclist"),
                 ground_points: int = 1500, margin: float = 2.5, max_tries: int = 200):
    """One ``(cloud, FrameAnnotation)`` pair with ``n_boxes`` non-overlapping boxes on the ground."""
    boxes, labels = [], []
    tries = 0
    while len(boxes) < n_boxes:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("random_scene: could not place non-overlapping boxes")
        label = classes[int(rng.integers(len(classes)))]
        (w, l, h), _ = TEMPLATES[label]
        w, l, h = w * rng.uniform(0.95, 1.05), l * rng.uniform(0.95, 1.05), h * rng.uniform(0.95, 1.05)
        b = Box3D(rng.uniform(area.x_min + margin, area.x_max - margin),
                  rng.uniform(area.y_min + margin, area.y_max - margin),
                  GROUND_Z + h / 2, w, l, h, rng.uniform(-math.pi, math.pi))
        grown = Box3D(b.x, b.y, b.z, b.w + 1.0, b.l + 1.0, b.h, b.yaw)
        if any(bev_iou(grown, o) > 0 for o in boxes):
            continue
        boxes.append(b)
        labels.append(label)
    ground = np.column_stack([
        rng.uniform(area.x_min, area.x_max, ground_points),
        rng.uniform(area.y_min, area.y_max, ground_points),
        GROUND_Z + rng.normal(0, 0.02, ground_points),
        rng.uniform(0.05, 0.3, ground_points),
    ])
    parts = [ground] + [surface_points(b, TEMPLATES[lab][1], rng) for b, lab in zip(boxes, labels)]
    objs = [ObjectLabel(lab, b, 0, 0.0, 50.0) for b, lab in zip(boxes, labels)]
    return np.concatenate(parts), FrameAnnotation("", objs)


def synthetic_frames(seed: int, count: int, area: RangeSpec, classes=("Car", "Cyclist"),
                     min_boxes: int = 1, max_boxes: int = 3) -> list:
    """``count`` scenes; frame ``i`` depends only on ``(seed, i)``."""
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        cloud, ann = random_scene(rng, area, int(rng.integers(min_boxes, max_boxes + 1)), classes)
        ann.frame_id = f"{i:06d}"
        out.append((cloud, ann))
    return out
