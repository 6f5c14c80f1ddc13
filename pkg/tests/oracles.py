"""Independent reference implementations used by the test-suite."""
import math

import numpy as np


def raster_iou(a, b, res=1000):
    """BEV IoU by counting pixel centres of a res x res grid over both boxes' extent."""
    def corners(box):
        x, y, _, w, l, _, t = box
        c, s = math.cos(t), math.sin(t)
        return [(x + c * u - s * v, y + s * u + c * v) for u, v in
                ((-w / 2, -l / 2), (w / 2, -l / 2), (w / 2, l / 2), (-w / 2, l / 2))]

    pts = np.array(corners(a) + corners(b))
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    side = max(hi - lo)
    step = side / res
    cs = lo[0] + (np.arange(res) + 0.5) * step
    rs = lo[1] + (np.arange(res) + 0.5) * step
    gx, gy = np.meshgrid(cs, rs)

    def inside(box):
        x, y, _, w, l, _, t = box
        dx, dy = gx - x, gy - y
        u = math.cos(t) * dx + math.sin(t) * dy
        v = -math.sin(t) * dx + math.cos(t) * dy
        return (np.abs(u) <= w / 2) & (np.abs(v) <= l / 2)

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def naive_nms(boxes, scores, thr, iou):
    """Repeatedly take the best remaining box and discard everything overlapping it."""
    remaining = list(range(len(scores)))
    keep = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best] or (scores[i] == scores[best] and i < best):
                best = i
        keep.append(best)
        remaining = [i for i in remaining if i != best and iou(boxes[i], boxes[best]) <= thr]
    return keep


def brute_topk(weights, mask, k):
    """Indices of the k largest real weights; ties by lower index (full sort)."""
    cand = [(-w, i) for i, (w, m) in enumerate(zip(weights, mask)) if m]
    cand.sort()
    return sorted(i for _, i in cand[:k])


def naive_ap_r40(frames, threshold, iou):
    """AP@R40 by re-running greedy matching at every distinct score threshold.

    ``frames``: list of (dets, gts, gt_ignored) with dets as (box, score)
    pairs. Matching is greedy in descending score (then index) order against
    the highest-IoU unmatched valid GT; an unmatched detection reaching the
    threshold with an ignored GT is neither TP nor FP.
    """
    scores = sorted({s for dets, _, _ in frames for _, s in dets}, reverse=True)
    n_gt = sum(sum(1 for ig in ign if not ig) for _, _, ign in frames)
    if n_gt == 0:
        return None
    curve = []
    for t in scores:
        tp = fp = 0
        for dets, gts, ign in frames:
            order = sorted((i for i, (_, s) in enumerate(dets) if s >= t), key=lambda i: (-dets[i][1], i))
            used = [False] * len(gts)
            for i in order:
                box = dets[i][0]
                best, best_iou = -1, -1.0
                for g, gt in enumerate(gts):
                    if used[g] or ign[g]:
                        continue
                    v = iou(box, gt)
                    if v >= threshold and v > best_iou:
                        best, best_iou = g, v
                if best >= 0:
                    used[best] = True
                    tp += 1
                elif not any(ign[g] and iou(box, gts[g]) >= threshold for g in range(len(gts))):
                    fp += 1
        curve.append((tp / n_gt, tp / (tp + fp) if tp + fp else 0.0))
    precisions = []
    for k in range(1, 41):
        r = k / 40
        ps = [p for rec, p in curve if rec >= r - 1e-12]
        precisions.append(max(ps) if ps else 0.0)
    return math.fsum(precisions) / 40
