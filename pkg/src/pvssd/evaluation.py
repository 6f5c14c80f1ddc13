"""KITTI-style difficulty buckets and AP@R40 for BEV and 3D boxes."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import bev_iou, iou_3d

log = logging.getLogger(__name__)

DIFFICULTIES = ("easy", "moderate", "hard")
MODES = ("bev", "3d")
RECALL_POINTS = 40

# (min bbox height px, max occlusion, max truncation)
DIFFICULTY_RULES = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: {"Car": 0.7, "Cyclist": 0.5})
    neighbours: dict = field(default_factory=lambda: {"Car": ("Van",), "Cyclist": ()})

    def __post_init__(self):
        for k, v in self.iou_thresholds.items():
            if not 0 < v <= 1:
                raise ValueError(f"EvalConfig: IoU threshold for {k} must be in (0, 1], got {v}")


def meets(obj, difficulty: str) -> bool:
    h_min, occ_max, trunc_max = DIFFICULTY_RULES[difficulty]
    vals = (obj.bbox_height, obj.occlusion, obj.truncation)
    if any(v is None or (isinstance(v, float) and math.isnan(v)) for v in vals):
        log.warning("object %s lacks difficulty fields; treated as ignored", obj.label)
        return False
    return obj.bbox_height >= h_min and obj.occlusion <= occ_max and obj.truncation <= trunc_max


def difficulty_bucket(obj) -> str:
    """Easiest bucket whose rules the object satisfies, else ``"ignored"``."""
    for d in DIFFICULTIES:
        if meets(obj, d):
            return d
    return "ignored"


def _iou_fn(mode: str):
    if mode not in MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    return bev_iou if mode == "bev" else iou_3d


def split_gts(objects, cls: str, difficulty: str, cfg: EvalConfig):
    """Valid and ignored GT boxes of one frame for ``cls`` at ``difficulty``."""
    valid, ignored = [], []
    for o in objects:
        if o.box is None:
            continue
        if o.label == cls:
            (valid if meets(o, difficulty) else ignored).append(o.box)
        elif o.label in cfg.neighbours.get(cls, ()):
            ignored.append(o.box)
    return valid, ignored


def match_frame(dets, valid, ignored, threshold: float, iou) -> list[tuple[float, int]]:
    """``(score, outcome)`` per detection with outcome 1 TP, 0 FP, -1 ignored."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    used = [False] * len(valid)
    out = []
    for i in order:
        box = dets[i].box
        best, best_iou = -1, -1.0
        for g, gt in enumerate(valid):
            if used[g]:
                continue
            v = iou(box, gt)
            if v >= threshold and v > best_iou:
                best, best_iou = g, v
        if best >= 0:
            used[best] = True
            out.append((dets[i].score, 1))
        elif any(iou(box, gt) >= threshold for gt in ignored):
            out.append((dets[i].score, -1))
        else:
            out.append((dets[i].score, 0))
    return out


def pr_curve(outcomes: list[tuple[float, int]], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Recall/precision at every distinct score threshold (descending)."""
    if not outcomes:
        return np.zeros(0), np.zeros(0)
    scores = np.array([s for s, _ in outcomes])
    kinds = np.array([k for _, k in outcomes])
    order = np.argsort(-scores, kind="stable")
    scores, kinds = scores[order], kinds[order]
    tp = np.cumsum(kinds == 1)
    fp = np.cumsum(kinds == 0)
    last = np.r_[scores[1:] != scores[:-1], True]   # end of each tie group
    recs, precs = [], []
    for t, f in zip(tp[last].tolist(), fp[last].tolist()):
        recs.append(t / n_gt)
        precs.append(t / (t + f) if t + f else 0.0)
    return np.array(recs), np.array(precs)


def interpolated_precision(recall: np.ndarray, precision: np.ndarray) -> list[float]:
    out = []
    for k in range(1, RECALL_POINTS + 1):
        r = k / RECALL_POINTS
        ps = precision[recall >= r - 1e-12]
        out.append(float(ps.max()) if len(ps) else 0.0)
    return out


def pr_curve_for(dets_per_frame: Sequence, gts_per_frame: Sequence, cls: str, difficulty: str = "moderate",
                 mode: str = "3d", cfg: Optional[EvalConfig] = None) -> tuple[np.ndarray, np.ndarray, int]:
    """Pooled ``(recall, precision, n_valid_gt)`` over all frames for one class and difficulty."""
    cfg = cfg or EvalConfig()
    if len(dets_per_frame) != len(gts_per_frame):
        raise ValueError("detections and ground truth cover different frame counts")
    iou = _iou_fn(mode)
    thr = cfg.iou_thresholds[cls]
    outcomes, n_gt = [], 0
    for dets, gts in zip(dets_per_frame, gts_per_frame):
        objects = getattr(gts, "objects", gts)
        valid, ignored = split_gts(objects, cls, difficulty, cfg)
        n_gt += len(valid)
        outcomes += match_frame([d for d in dets if d.label == cls], valid, ignored, thr, iou)
    if n_gt == 0:
        return np.zeros(0), np.zeros(0), 0
    rec, prec = pr_curve(outcomes, n_gt)
    return rec, prec, n_gt


def compute_ap_r40(dets_per_frame: Sequence, gts_per_frame: Sequence, cls: str, difficulty: str = "moderate",
                   mode: str = "3d", cfg: Optional[EvalConfig] = None) -> Optional[float]:
    """AP over 40 recall points; ``None`` when the class has no valid GT at this difficulty.

    ``dets_per_frame[i]`` holds objects with ``label``, ``box`` and ``score``;
    ``gts_per_frame[i]`` is a sequence of labelled objects (or a frame
    annotation with ``.objects``).
    """
    rec, prec, n_gt = pr_curve_for(dets_per_frame, gts_per_frame, cls, difficulty, mode, cfg)
    if n_gt == 0:
        return None
    return math.fsum(interpolated_precision(rec, prec)) / RECALL_POINTS


def evaluate(dets_per_frame, gts_per_frame, classes: Sequence[str] = ("Car", "Cyclist"),
             cfg: Optional[EvalConfig] = None) -> dict:
    """``{(class, mode, difficulty): AP or None}`` over every combination."""
    return {(c, m, d): compute_ap_r40(dets_per_frame, gts_per_frame, c, d, m, cfg)
            for c in classes for m in MODES for d in DIFFICULTIES}


def format_report(results: dict) -> tuple[str, str]:
    """Human table and ``key=value`` lines; absent APs print as ``n/a``."""
    classes = sorted({k[0] for k in results})
    lines = [f"{'class':<10}{'mode':<6}" + "".join(f"{d:>10}" for d in DIFFICULTIES)]
    kv = []
    for c in classes:
        for m in MODES:
            cells = []
            for d in DIFFICULTIES:
                ap = results.get((c, m, d))
                cells.append(f"{'n/a' if ap is None else f'{100 * ap:.2f}':>10}")
                kv.append(f"ap_r40.{c}.{m}.{d}={'nan' if ap is None else repr(ap)}")
            lines.append(f"{c:<10}{m:<6}" + "".join(cells))
    return "\n".join(lines) + "\n", "\n".join(kv) + "\n"
