"""Naive reference implementations used by the verification suite.

Everything here is deliberately written the slow, obvious way (explicit
loops, threshold enumeration, no shared helpers with the production code
paths) so it can serve as an independent cross-check.
"""

from __future__ import annotations

import numpy as np


def maxpool_scan(x: np.ndarray, size: int, stride: int, pad: int) -> np.ndarray:
    """Exhaustive window scan max pool; padding cells are -inf."""
    c, h, w = x.shape
    padded = np.full((c, h + 2 * pad, w + 2 * pad), -np.inf, dtype=x.dtype)
    padded[:, pad : pad + h, pad : pad + w] = x
    out_h = (h + 2 * pad - size) // stride + 1
    out_w = (w + 2 * pad - size) // stride + 1
    out = np.empty((c, out_h, out_w), dtype=x.dtype)
    for ch in range(c):
        for i in range(out_h):
            for j in range(out_w):
                window = padded[ch, i * stride : i * stride + size, j * stride : j * stride + size]
                out[ch, i, j] = window.max()
    return out


def conv_direct(x: np.ndarray, weights: np.ndarray, biases: np.ndarray,
                stride: int, pad: int) -> np.ndarray:
    """Direct nested-loop convolution (no batch-norm, linear activation)."""
    cin, h, w = x.shape
    f, _, k, _ = weights.shape
    padded = np.zeros((cin, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    padded[:, pad : pad + h, pad : pad + w] = x
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    out = np.zeros((f, out_h, out_w), dtype=x.dtype)
    for fi in range(f):
        for i in range(out_h):
            for j in range(out_w):
                acc = 0.0
                for ci in range(cin):
                    for ki in range(k):
                        for kj in range(k):
                            acc += (
                                weights[fi, ci, ki, kj]
                                * padded[ci, i * stride + ki, j * stride + kj]
                            )
                out[fi, i, j] = acc + biases[fi]
    return out


def iou_grid_count(a, b, cells: int = 400) -> float:
    """Estimate IoU by counting membership of a fine grid of sample points."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    lo_x, hi_x = min(ax1, bx1), max(ax2, bx2)
    lo_y, hi_y = min(ay1, by1), max(ay2, by2)
    xs = lo_x + (np.arange(cells) + 0.5) * (hi_x - lo_x) / cells
    ys = lo_y + (np.arange(cells) + 0.5) * (hi_y - lo_y) / cells
    cell_area = ((hi_x - lo_x) / cells) * ((hi_y - lo_y) / cells)
    in_a = in_b = in_both = 0
    for y in ys:
        for x in xs:
            pa = ax1 < x < ax2 and ay1 < y < ay2
            pb = bx1 < x < bx2 and by1 < y < by2
            in_a += pa
            in_b += pb
            in_both += pa and pb
    union = (in_a + in_b - in_both) * cell_area
    if union == 0:
        return 0.0
    return (in_both * cell_area) / union


def ap_threshold_enumeration(scored_labels, gt_count: int) -> float:
    """AP by literally enumerating every score threshold.

    ``scored_labels`` is [(score, is_tp)]; at each distinct score s the point
    (recall, precision) counts detections with score >= s, and the AP sum
    uses the maximum precision at any recall at least as large as the step's.
    """
    if gt_count == 0 or not scored_labels:
        return 0.0
    thresholds = sorted({score for score, _ in scored_labels}, reverse=True)
    points = []
    for t in thresholds:
        tp = sum(1 for score, is_tp in scored_labels if score >= t and is_tp)
        fp = sum(1 for score, is_tp in scored_labels if score >= t and not is_tp)
        recall = tp / gt_count
        precision = tp / (tp + fp) if tp + fp else 0.0
        points.append((recall, precision))
    ap = 0.0
    prev_recall = 0.0
    for recall, _ in points:
        if recall <= prev_recall:
            continue
        best = max(p for r, p in points if r >= recall)
        ap += (recall - prev_recall) * best
        prev_recall = recall
    return ap


def _iou_corner(a, b) -> float:
    ax1, ay1 = a.x - a.w / 2, a.y - a.h / 2
    ax2, ay2 = a.x + a.w / 2, a.y + a.h / 2
    bx1, by1 = b.x - b.w / 2, b.y - b.h / 2
    bx2, by2 = b.x + b.w / 2, b.y + b.h / 2
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def brute_force_evaluate(detections, ground_truth, num_classes: int,
                         iou_threshold: float = 0.5):
    """Independent evaluator: plain-loop matching plus threshold-enumerated AP.

    Returns (per-class AP list, mAP over classes present in the ground truth).
    Uses the same deterministic ordering contract as the production
    evaluator: score descending, ties by image id then box coordinates.
    """
    dets = sorted(
        detections,
        key=lambda d: (-d.score, d.image_id, d.box.x, d.box.y, d.box.w, d.box.h, d.class_index),
    )
    gts = sorted(
        ground_truth,
        key=lambda g: (g.image_id, g.class_index, g.box.x, g.box.y, g.box.w, g.box.h, g.ignore),
    )
    consumed = [False] * len(gts)
    labeled = []  # (class_index, score, is_tp)
    for det in dets:
        best_index = -1
        best_iou = 0.0
        for gi, gt in enumerate(gts):
            if consumed[gi] or gt.ignore:
                continue
            if gt.image_id != det.image_id or gt.class_index != det.class_index:
                continue
            overlap = _iou_corner(det.box, gt.box)
            if overlap > best_iou:
                best_iou = overlap
                best_index = gi
        if best_index >= 0 and best_iou >= iou_threshold:
            consumed[best_index] = True
            labeled.append((det.class_index, det.score, True))
            continue
        hit_ignore = False
        for gt in gts:
            if gt.ignore and gt.image_id == det.image_id:
                if _iou_corner(det.box, gt.box) >= iou_threshold:
                    hit_ignore = True
                    break
        if not hit_ignore:
            labeled.append((det.class_index, det.score, False))
    aps = []
    evaluated = []
    for cls in range(num_classes):
        gt_count = sum(1 for gt in gts if not gt.ignore and gt.class_index == cls)
        scored = [(score, is_tp) for c, score, is_tp in labeled if c == cls]
        ap = ap_threshold_enumeration(scored, gt_count)
        aps.append(ap)
        if gt_count:
            evaluated.append(ap)
    mean_ap = sum(evaluated) / len(evaluated) if evaluated else 0.0
    return aps, mean_ap
