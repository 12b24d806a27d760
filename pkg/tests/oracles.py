"""Independent reference computations used as test oracles.

Each one is written from the definition, sharing no code with the package
beyond the ``Box`` value type.
"""
import math

import numpy as np


def box_iou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def ap_by_thresholds(dets, gts, thr=0.5):
    """AP by enumerating confidence thresholds.

    ``dets``: list of (image, confidence, (x0, y0, x1, y1)) with distinct
    confidences; ``gts``: dict image -> list of boxes. For every threshold the
    kept detections are matched from scratch (descending confidence, each
    takes the best-IoU free ground truth), giving one (recall, precision)
    point. AP integrates the upper envelope of precision over recall.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None if not dets else 0.0
    points = []
    for tau in sorted({d[1] for d in dets}, reverse=True):
        kept = sorted([d for d in dets if d[1] >= tau], key=lambda d: -d[1])
        used = {k: [False] * len(v) for k, v in gts.items()}
        tp = 0
        for img, _, box in kept:
            best, best_j = -1.0, None
            for j, g in enumerate(gts.get(img, [])):
                if used[img][j]:
                    continue
                v = box_iou(box, g)
                if v > best:
                    best, best_j = v, j
            if best_j is not None and best >= thr:
                used[img][best_j] = True
                tp += 1
        points.append((tp / n_gt, tp / len(kept)))
    ap, prev_r = 0.0, 0.0
    for r in sorted({p[0] for p in points}):
        if r <= prev_r:
            continue
        p_env = max(p for rr, p in points if rr >= r)
        ap += (r - prev_r) * p_env
        prev_r = r
    return ap


def brute_select(phi, boxes):
    """Index of the first box maximizing (sum of phi inside) / sqrt(area), by direct loops."""
    best, best_i = -math.inf, None
    for i, (x0, y0, x1, y1) in enumerate(boxes):
        total = 0.0
        for y in range(int(y0), int(y1)):
            for x in range(int(x0), int(x1)):
                total += float(phi[y][x])
        score = total / math.sqrt((x1 - x0) * (y1 - y0))
        if score > best:
            best, best_i = score, i
    return best_i, best


def softmax_list(logits):
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    s = sum(e)
    return [v / s for v in e]


def attention_2x2(h, V):
    """Scaled dot-product attention for 2 queries and 2 keys with scalar arithmetic."""
    d = len(h[0])
    A = []
    for t in range(2):
        logits = [sum(h[t][k] * V[j][k] for k in range(d)) / math.sqrt(d) for j in range(2)]
        A.append(softmax_list(logits))
    H = [[sum(A[t][j] * V[j][k] for j in range(2)) for k in range(d)] for t in range(2)]
    return A, H


def numeric_grad(f, x, eps=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g
