"""Anchor grid, target assignment, residual coding, detection losses and box prediction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import functional as F
from .autodiff.nn import Conv2d, Module
from .autodiff.tensor import ShapeError, Tensor, make_node
from .geometry import Box3D, RangeSpec, nms_bev, pairwise_bev_iou

PROB_EPS = 1e-7
ANCHOR_YAWS = (0.0, math.pi / 2)


@dataclass
class AnchorClass:
    name: str
    size: tuple            # (w, l, h)
    z: float
    pos_threshold: float
    neg_threshold: float

    def __post_init__(self):
        self.size = tuple(float(s) for s in self.size)
        if len(self.size) != 3 or min(self.size) <= 0:
            raise ValueError(f"anchor {self.name}: sizes must be three positive numbers")
        if not 0 < self.neg_threshold <= self.pos_threshold <= 1:
            raise ValueError(f"anchor {self.name}: need 0 < neg <= pos <= 1")


DEFAULT_ANCHORS = (
    AnchorClass("Car", (1.6, 3.9, 1.56), -1.0, 0.6, 0.45),
    AnchorClass("Cyclist", (0.6, 1.76, 1.73), -0.6, 0.5, 0.35),
)


@dataclass
class LossWeights:
    loc: float = 2.0
    cls: float = 1.0
    dir: float = 0.2
    alpha: float = 0.25
    gamma: float = 2.0


@dataclass
class AnchorGrid:
    """Anchors flattened in ``(a, iy, ix)`` order with ``a = class * 2 + yaw index``."""
    boxes: np.ndarray       # (M, 7)
    classes: np.ndarray     # (M,) index into ``names``
    names: tuple
    shape: tuple            # (A, H, W)

    def __len__(self):
        return len(self.boxes)


def generate_anchors(rng_spec: RangeSpec, height: int, width: int, classes=DEFAULT_ANCHORS) -> AnchorGrid:
    dx = (rng_spec.x_max - rng_spec.x_min) / width
    dy = (rng_spec.y_max - rng_spec.y_min) / height
    xs = rng_spec.x_min + (np.arange(width) + 0.5) * dx
    ys = rng_spec.y_min + (np.arange(height) + 0.5) * dy
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    blocks, cls = [], []
    for ci, ac in enumerate(classes):
        for yaw in ANCHOR_YAWS:
            b = np.empty((height * width, 7))
            b[:, 0], b[:, 1], b[:, 2] = gx.ravel(), gy.ravel(), ac.z
            b[:, 3:6] = ac.size
            b[:, 6] = yaw
            blocks.append(b)
            cls.append(np.full(height * width, ci))
    return AnchorGrid(np.concatenate(blocks), np.concatenate(cls), tuple(c.name for c in classes),
                      (2 * len(classes), height, width))


@dataclass
class Assignment:
    labels: np.ndarray      # (M,) 1 positive, 0 negative, -1 ignore
    matched: np.ndarray     # (M,) GT index or -1
    residuals: np.ndarray   # (M, 7), zero off the positives
    direction: np.ndarray   # (M,) bit, zero off the positives

    @property
    def positives(self) -> np.ndarray:
        return np.nonzero(self.labels == 1)[0]

    @property
    def num_pos(self) -> int:
        return int((self.labels == 1).sum())


def match_anchors(anchors: AnchorGrid, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                  classes=DEFAULT_ANCHORS) -> Assignment:
    """BEV-IoU assignment, each anchor only against GTs of its own class."""
    m = len(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    gt_classes = np.asarray(gt_classes).reshape(-1)
    labels = np.zeros(m, dtype=np.int64)
    matched = np.full(m, -1, dtype=np.int64)
    for ci, ac in enumerate(classes):
        a_idx = np.nonzero(anchors.classes == ci)[0]
        g_idx = np.nonzero(gt_classes == ci)[0]
        if len(a_idx) == 0 or len(g_idx) == 0:
            continue
        iou = pairwise_bev_iou(anchors.boxes[a_idx], gt_boxes[g_idx])
        best_gt = iou.argmax(axis=1)
        best_iou = iou[np.arange(len(a_idx)), best_gt]
        lab = np.where(best_iou < ac.neg_threshold, 0, -1)
        pos = best_iou >= ac.pos_threshold
        lab[pos] = 1
        mat = np.where(pos, best_gt, -1)
        for j in range(len(g_idx)):
            k = int(iou[:, j].argmax())
            if iou[k, j] > 0:
                lab[k] = 1
                mat[k] = j
        labels[a_idx] = lab
        matched[a_idx] = np.where(mat >= 0, g_idx[np.maximum(mat, 0)], -1)
    residuals = np.zeros((m, 7))
    direction = np.zeros(m)
    pos = np.nonzero(labels == 1)[0]
    if len(pos):
        residuals[pos], direction[pos] = encode_boxes(anchors.boxes[pos], gt_boxes[matched[pos]])
    return Assignment(labels, matched, residuals, direction)


def wrap_half_turn(a):
    """Wrap into ``[-pi/2, pi/2)``."""
    return np.mod(np.asarray(a) + math.pi / 2, math.pi) - math.pi / 2


def encode_boxes(anchors, gts) -> tuple[np.ndarray, np.ndarray]:
    """Residuals ``(..., 7)`` and direction bits for matched anchor/GT arrays."""
    a = np.asarray(anchors, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    if np.any(a[..., 3:6] <= 0) or np.any(g[..., 3:6] <= 0):
        raise ValueError("encode_boxes: sizes must be positive")
    d = np.hypot(a[..., 3], a[..., 4])
    r = np.empty(np.broadcast_shapes(a.shape, g.shape))
    r[..., 0] = (g[..., 0] - a[..., 0]) / d
    r[..., 1] = (g[..., 1] - a[..., 1]) / d
    r[..., 2] = (g[..., 2] - a[..., 2]) / d
    r[..., 3:6] = np.log(g[..., 3:6] / a[..., 3:6])
    r[..., 6] = wrap_half_turn(g[..., 6] - a[..., 6])
    return r, (g[..., 6] >= 0).astype(np.float64)


def decode_boxes(anchors, residuals, direction) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.float64)
    r = np.asarray(residuals, dtype=np.float64)
    d = np.hypot(a[..., 3], a[..., 4])
    out = np.empty(np.broadcast_shapes(a.shape, r.shape))
    out[..., 0] = a[..., 0] + r[..., 0] * d
    out[..., 1] = a[..., 1] + r[..., 1] * d
    out[..., 2] = a[..., 2] + r[..., 2] * d
    out[..., 3:6] = a[..., 3:6] * np.exp(r[..., 3:6])
    base = np.mod(a[..., 6] + r[..., 6], math.pi)
    out[..., 6] = np.where(np.asarray(direction) >= 0.5, base, base - math.pi)
    return out


# --------------------------------------------------------------------------- losses

def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def loc_loss(pred: Tensor, target: np.ndarray, n_pos: int) -> Tensor:
    """Smooth-L1 summed over ``(7, P)`` residuals divided by ``n_pos``; yaw compared through ``sin``."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.shape[0] != 7:
        raise ShapeError("loc_loss", pred.shape, target.shape)
    norm = float(max(n_pos, 1))
    diff = pred.data - target
    yaw = diff[6].copy()
    diff[6] = np.sin(yaw)
    value = smooth_l1(diff).sum() / norm

    def back(g):
        grad = np.where(np.abs(diff) < 1.0, diff, np.sign(diff))
        grad[6] *= np.cos(yaw)
        return (g * grad / norm,)

    return make_node(np.array(value), (pred,), back, "loc_loss")


def focal_loss(prob: Tensor, labels: np.ndarray, n_pos: int, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss on probabilities; label -1 is ignored, normalized by ``max(n_pos, 1)``."""
    labels = np.asarray(labels)
    if prob.shape != labels.shape:
        raise ShapeError("focal_loss", prob.shape, labels.shape)
    p = prob.data
    inside = (p >= PROB_EPS) & (p <= 1 - PROB_EPS)
    pc = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    pos, neg = labels == 1, labels == 0
    q = np.where(pos, pc, 1 - pc)
    a = np.where(pos, alpha, 1 - alpha)
    use = pos | neg
    norm = float(max(n_pos, 1))
    per = np.where(use, -a * (1 - q) ** gamma * np.log(q), 0.0)
    value = per.sum() / norm

    def back(g):
        dq = -a * (-gamma * (1 - q) ** (gamma - 1) * np.log(q) + (1 - q) ** gamma / q)
        dp = np.where(pos, dq, -dq) * use * inside
        return (g * dp / norm,)

    return make_node(np.array(value), (prob,), back, "focal_loss")


def direction_loss(prob: Tensor, target: np.ndarray) -> Tensor:
    """Binary cross-entropy averaged over the given (positive) anchors; 0 when there are none."""
    target = np.asarray(target, dtype=np.float64)
    if prob.shape != target.shape:
        raise ShapeError("direction_loss", prob.shape, target.shape)
    n = prob.size
    if n == 0:
        return make_node(np.array(0.0), (prob,), lambda g: (np.zeros(prob.shape),), "direction_loss")
    p = prob.data
    inside = (p >= PROB_EPS) & (p <= 1 - PROB_EPS)
    pc = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    value = -(target * np.log(pc) + (1 - target) * np.log(1 - pc)).sum() / n

    def back(g):
        return (g * (-(target / pc) + (1 - target) / (1 - pc)) * inside / n,)

    return make_node(np.array(value), (prob,), back, "direction_loss")


def total_loss(loc: Tensor, cls: Tensor, dirl: Tensor, w: LossWeights = LossWeights()) -> Tensor:
    """Weighted sum; each part is already normalized, so there is no further division."""
    return F.add(F.add(F.mul(loc, w.loc), F.mul(cls, w.cls)), F.mul(dirl, w.dir))


# --------------------------------------------------------------------------- network head

@dataclass
class HeadOutput:
    cls: Tensor    # (A, H, W) logits
    box: Tensor    # (7A, H, W)
    dir: Tensor    # (A, H, W) logits

    def flat_cls(self) -> Tensor:
        return F.reshape(self.cls, (self.cls.size,))

    def flat_box(self) -> Tensor:
        a, h, w = self.cls.shape
        return F.reshape(F.transpose(F.reshape(self.box, (a, 7, h * w)), (1, 0, 2)), (7, a * h * w))

    def flat_dir(self) -> Tensor:
        return F.reshape(self.dir, (self.dir.size,))


class SSDHead(Module):
    def __init__(self, c_in: int, n_anchors: int, rng: np.random.Generator, prior: float = 0.01):
        self.n_anchors = n_anchors
        self.cls = Conv2d(c_in, n_anchors, 1, rng)
        self.box = Conv2d(c_in, 7 * n_anchors, 1, rng)
        self.dir = Conv2d(c_in, n_anchors, 1, rng)
        # rare-foreground prior keeps the initial focal loss small
        self.cls.bias.data[:] = -math.log((1 - prior) / prior)

    def forward(self, x: Tensor) -> HeadOutput:
        return HeadOutput(self.cls(x), self.box(x), self.dir(x))


def detection_losses(out: HeadOutput, assign: Assignment, w: LossWeights = LossWeights()) -> dict:
    pos = assign.positives
    n_pos = len(pos)
    cls = focal_loss(F.sigmoid(out.flat_cls()), assign.labels, n_pos, w.alpha, w.gamma)
    box = F.gather_columns(out.flat_box(), pos)
    loc = loc_loss(box, assign.residuals[pos].T, n_pos)
    dir_logit = F.reshape(F.gather_columns(F.reshape(out.flat_dir(), (1, out.dir.size)), pos), (n_pos,))
    dirl = direction_loss(F.sigmoid(dir_logit), assign.direction[pos])
    return {"loc": loc, "cls": cls, "dir": dirl, "total": total_loss(loc, cls, dirl, w)}


@dataclass
class Detection:
    label: str
    box: Box3D
    score: float
    anchor: int = field(default=-1, compare=False)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def predict(out: HeadOutput, anchors: AnchorGrid, score_threshold: float = 0.3,
            nms_threshold: float = 0.01) -> list[Detection]:
    """Threshold, decode, per-class BEV NMS; detections sorted by descending score."""
    scores = _sigmoid(out.flat_cls().data)
    cand = np.nonzero(scores >= score_threshold)[0]
    if len(cand) == 0:
        return []
    res = out.flat_box().data[:, cand].T
    bits = _sigmoid(out.flat_dir().data[cand]) >= 0.5
    boxes = decode_boxes(anchors.boxes[cand], res, bits)
    finite = np.all(np.isfinite(boxes), axis=1) & np.all(boxes[:, 3:6] > 0, axis=1)
    dets = []
    for ci, name in enumerate(anchors.names):
        sel = np.nonzero((anchors.classes[cand] == ci) & finite)[0]
        if len(sel) == 0:
            continue
        keep = nms_bev(boxes[sel], scores[cand[sel]], nms_threshold)
        for k in keep:
            i = sel[k]
            dets.append(Detection(name, Box3D.from_array(boxes[i]), float(scores[cand[i]]), int(cand[i])))
    dets.sort(key=lambda d: (-d.score, d.anchor))
    return dets
