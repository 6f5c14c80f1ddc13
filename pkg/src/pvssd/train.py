"""Frame preparation and the training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Adam, backward, no_grad, one_cycle
from .dataset import DETECTION_CLASSES, FrameAnnotation, GTDatabase
from .head import Detection, LossWeights, detection_losses, match_anchors, predict
from .model import PVSSD
from .preprocess import (AugmentParams, BEVMap, GridSpec, VoxelSet, VoxelSpec, augment_scene, encode_bev_map,
                         filter_range, voxelize)


class TrainingError(RuntimeError):
    pass


@dataclass
class PreparedFrame:
    frame_id: str
    bev: BEVMap
    voxels: VoxelSet
    gt_boxes: np.ndarray     # (G, 7)
    gt_classes: np.ndarray   # (G,) anchor-class indices
    annotation: FrameAnnotation


def prepare_frame(cloud, ann: FrameAnnotation, grid: GridSpec, voxels: VoxelSpec, class_names,
                  rng: np.random.Generator) -> PreparedFrame:
    pts = filter_range(cloud, grid.range)
    objs = [o for o in ann.objects if o.box is not None and o.label in class_names]
    boxes = np.array([o.box.to_array() for o in objs]).reshape(-1, 7)
    classes = np.array([list(class_names).index(o.label) for o in objs], dtype=np.int64)
    return PreparedFrame(ann.frame_id, encode_bev_map(pts, grid), voxelize(pts, voxels, rng), boxes, classes, ann)


@dataclass
class OptimSettings:
    lr: float = 0.003
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.99)
    pct_start: float = 0.4
    div_factor: float = 10.0
    final_div_factor: float = 1e4


LOG_HEADER = "step\tloc\tcls\tdir\ttotal\tlr"


def format_log_row(step: int, parts: dict, lr: float) -> str:
    vals = [repr(float(parts[k])) for k in ("loc", "cls", "dir", "total")]
    return "\t".join([str(step)] + vals + [repr(lr)])


def frame_loss(model: PVSSD, frame: PreparedFrame, anchors, weights: LossWeights, rng: np.random.Generator):
    out = model(frame.bev.data, frame.voxels, rng)
    assign = match_anchors(anchors, frame.gt_boxes, frame.gt_classes, model.spec.anchors)
    return detection_losses(out, assign, weights), out


def train(model: PVSSD, frames: list, steps: int, rng: np.random.Generator, optim: OptimSettings = OptimSettings(),
          weights: LossWeights = LossWeights(), augment: Optional[AugmentParams] = None,
          gtdb: Optional[GTDatabase] = None, on_step: Optional[Callable[[int, dict, float], None]] = None,
          order: str = "cycle") -> list[dict]:
    """Run ``steps`` single-frame Adam steps; returns one dict of floats per step.

    ``frames`` holds raw ``(cloud, annotation)`` pairs when ``augment`` is
    set, else :class:`PreparedFrame` objects reused as they are.
    """
    spec = model.spec
    names = tuple(a.name for a in spec.anchors)
    anchors = model.anchors()
    opt = Adam(model.parameters(), lr=optim.lr, betas=tuple(optim.betas), weight_decay=optim.weight_decay)
    history = []
    n = len(frames)
    if n == 0 and steps > 0:
        raise TrainingError("no training frames")
    perm = np.arange(n)
    for step in range(steps):
        if order == "shuffle" and step % n == 0:
            perm = rng.permutation(n)
        item = frames[perm[step % n]]
        if augment is not None:
            cloud, ann = augment_scene(item[0], item[1], gtdb, augment, rng)
            frame = prepare_frame(cloud, ann, spec.grid, spec.voxels, names, rng)
        else:
            frame = item
        lr, beta1 = one_cycle(step, steps, optim.lr, optim.pct_start, optim.div_factor, optim.final_div_factor)
        opt.lr, opt.beta1 = lr, beta1
        opt.zero_grad()
        parts, _ = frame_loss(model, frame, anchors, weights, rng)
        total = parts["total"].item()
        if not math.isfinite(total):
            raise TrainingError(f"non-finite loss at step {step} on frame {frame.frame_id}: "
                                + ", ".join(f"{k}={v.item()!r}" for k, v in parts.items()))
        backward(parts["total"])
        opt.step()
        row = {k: v.item() for k, v in parts.items()}
        row["lr"] = lr
        history.append(row)
        if on_step is not None:
            on_step(step, row, lr)
    return history


def detect(model: PVSSD, frame: PreparedFrame, rng: np.random.Generator, score_threshold: float = 0.3,
           nms_threshold: float = 0.01) -> list[Detection]:
    with no_grad():
        out = model(frame.bev.data, frame.voxels, rng)
    return predict(out, model.anchors(), score_threshold, nms_threshold)


def evaluate_losses(model: PVSSD, frames: list, rng: np.random.Generator,
                    weights: LossWeights = LossWeights()) -> list[dict]:
    anchors = model.anchors()
    rows = []
    with no_grad():
        for f in frames:
            parts, _ = frame_loss(model, f, anchors, weights, rng)
            rows.append({k: v.item() for k, v in parts.items()})
    return rows


__all__ = ["DETECTION_CLASSES", "PreparedFrame", "prepare_frame", "OptimSettings", "train", "detect",
           "evaluate_losses", "TrainingError", "LOG_HEADER", "format_log_row"]
