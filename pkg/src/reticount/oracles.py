"""Slow, independent reference implementations used to cross-check fast paths.

Nothing here shares code with the routines it checks beyond the Box and
Detection containers.
"""

from __future__ import annotations

import math
from itertools import combinations, permutations

import numpy as np


def raster_iou(a, b) -> float:
    """IoU of integer-cornered boxes by counting unit pixels on a grid."""
    xs = [int(v) for v in (a[0], a[2], b[0], b[2])]
    ys = [int(v) for v in (a[1], a[3], b[1], b[3])]
    x0, y0 = min(xs), min(ys)
    w, h = max(xs) - x0 + 1, max(ys) - y0 + 1

    def mask(bx):
        m = np.zeros((h, w), dtype=bool)
        m[int(bx[1]) - y0 : int(bx[3]) - y0, int(bx[0]) - x0 : int(bx[2]) - x0] = True
        return m

    ma, mb = mask(a), mask(b)
    union = np.count_nonzero(ma | mb)
    return np.count_nonzero(ma & mb) / union if union else 0.0


def scalar_iou(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def naive_conv2d(x, w, b, stride, padding):
    """Six nested loops; float64 accumulation."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = float(b[oi])
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                y = i * stride + di - padding
                                xx = j * stride + dj - padding
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += float(x[ni, ci, y, xx]) * float(w[oi, ci, di, dj])
                    out[ni, oi, i, j] = acc
    return out


def quadratic_nms(dets, iou_threshold: float, top_k: int):
    """Repeatedly take the best remaining detection of a class, drop its overlaps."""
    survivors = []
    classes = sorted({d.class_id for d in dets})
    for cls in classes:
        pool = [d for d in dets if d.class_id == cls and d.box.area > 0]
        while pool:
            best = pool[0]
            for d in pool[1:]:
                if d.confidence > best.confidence or (d.confidence == best.confidence and d.anchor_index < best.anchor_index):
                    best = d
            survivors.append(best)
            bb = best.box
            pool = [
                d
                for d in pool
                if d is not best
                and scalar_iou((bb.xmin, bb.ymin, bb.xmax, bb.ymax), (d.box.xmin, d.box.ymin, d.box.xmax, d.box.ymax)) <= iou_threshold
            ]
    survivors.sort(key=lambda d: (-d.confidence, d.anchor_index))
    return survivors[:top_k]


def brute_force_match(gts, labels, anchors, threshold: float):
    """Two-stage matching with plain Python loops.

    Stage 1 walks all (iou, gt, anchor) triples in descending IoU (ties by
    gt then anchor index) and takes a pair whenever both sides are free.
    """
    n_a = len(anchors)
    ious = [[scalar_iou(g, a) for a in anchors] for g in gts]
    index = [-1] * n_a
    triples = sorted(
        ((ious[g][a], g, a) for g in range(len(gts)) for a in range(n_a) if ious[g][a] > 0),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    gt_done = set()
    anchor_used = set()
    for _, g, a in triples:
        if g in gt_done or a in anchor_used:
            continue
        index[a] = g
        gt_done.add(g)
        anchor_used.add(a)
    for a in range(n_a):
        if index[a] >= 0 or not gts:
            continue
        best_g, best = -1, -1.0
        for g in range(len(gts)):
            if ious[g][a] > best:
                best, best_g = ious[g][a], g
        if best >= threshold:
            index[a] = best_g
    out_labels = [labels[i] if i >= 0 else 0 for i in index]
    return out_labels, index


def exhaustive_hard_negatives(ce_row, labels_row, neg_pos_ratio: float, min_negatives: int):
    """Enumerate every negative subset of the mandated size; return the max-loss one."""
    neg = [i for i, lab in enumerate(labels_row) if lab == 0]
    n_pos = len(labels_row) - len(neg)
    k = min(int(neg_pos_ratio * n_pos) if n_pos else min_negatives, len(neg))
    best, best_set = -math.inf, ()
    for subset in combinations(neg, k):
        s = sum(ce_row[i] for i in subset)
        if s > best:
            best, best_set = s, subset
    return set(best_set), best


def max_assignment(pred_boxes, pred_labels, truth_boxes, truth_labels, iou_threshold: float) -> int:
    """Largest one-to-one same-class match count at IoU >= threshold (brute force)."""
    n_p, n_t = len(pred_boxes), len(truth_boxes)
    ok = [[pred_labels[i] == truth_labels[j] and scalar_iou(pred_boxes[i], truth_boxes[j]) >= iou_threshold for j in range(n_t)] for i in range(n_p)]
    best = 0
    if n_p <= n_t:
        for perm in permutations(range(n_t), n_p):
            best = max(best, sum(ok[i][perm[i]] for i in range(n_p)))
    else:
        for perm in permutations(range(n_p), n_t):
            best = max(best, sum(ok[perm[j]][j] for j in range(n_t)))
    return best


def direct_lanczos(image, out_h: int, out_w: int, a: int = 3):
    """Per-output-pixel 2-D Lanczos summation with per-pixel normalization."""
    h, w = image.shape[:2]
    sy, sx = h / out_h, w / out_w
    ty, tx = max(sy, 1.0), max(sx, 1.0)
    out = np.zeros((out_h, out_w) + image.shape[2:])

    def kern(t):
        if abs(t) >= a:
            return 0.0
        if t == 0:
            return 1.0
        pt = math.pi * t
        return a * math.sin(pt) * math.sin(pt / a) / (pt * pt)

    for oy in range(out_h):
        cy = (oy + 0.5) * sy
        ys = range(max(0, int(math.floor(cy - a * ty)) - 1), min(h, int(math.ceil(cy + a * ty)) + 1))
        ky = [kern((y + 0.5 - cy) / ty) for y in ys]
        for ox in range(out_w):
            cx = (ox + 0.5) * sx
            xs = range(max(0, int(math.floor(cx - a * tx)) - 1), min(w, int(math.ceil(cx + a * tx)) + 1))
            kx = [kern((x + 0.5 - cx) / tx) for x in xs]
            acc = 0.0
            norm = 0.0
            for y, wy in zip(ys, ky):
                for x, wx in zip(xs, kx):
                    acc = acc + wy * wx * image[y, x].astype(np.float64)
                    norm += wy * wx
            out[oy, ox] = acc / norm
    return out
