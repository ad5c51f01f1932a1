"""Detection scoring: IoU, greedy matching, P/R/F1, AP50, complexity counts.

Boxes are (x_center, y_center, w, h) in pixels throughout. Matching follows
the standard greedy protocol: detections sorted by confidence (ties by
insertion order) each claim the unmatched ground truth with the highest
IoU at or above the threshold (IoU ties go to the lowest ground-truth index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def iou(a, b):
    """Intersection over union of two (x, y, w, h) center-format boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if aw < 0 or ah < 0 or bw < 0 or bh < 0:
        raise ValueError(f"negative box extents: {a} / {b}")
    if aw == 0 or ah == 0 or bw == 0 or bh == 0:
        return 0.0
    ix = min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2)
    iy = min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


@dataclass
class MatchResult:
    """Confidence-ordered detections labelled TP/FP plus the miss count."""

    confidences: np.ndarray  # sorted descending
    is_tp: np.ndarray  # bool, aligned with confidences
    num_gt: int
    assignments: list = field(default_factory=list)  # (frame, det idx, gt idx)

    @property
    def tp(self):
        return int(self.is_tp.sum())

    @property
    def fn(self):
        return self.num_gt - self.tp


def match_detections(dets_per_frame, gts_per_frame, iou_thr=0.5):
    """Greedily match per-frame detections against ground truths.

    ``dets_per_frame`` maps frame id -> list of (box, confidence);
    ``gts_per_frame`` maps frame id -> list of boxes. Returns a MatchResult
    over all frames, ordered by confidence descending.
    """
    records = []  # (confidence, insertion order, frame, det idx)
    order = 0
    for frame, dets in dets_per_frame.items():
        for i, (_box, conf) in enumerate(dets):
            records.append((conf, order, frame, i))
            order += 1
    # stable sort on -confidence keeps insertion order for ties
    records.sort(key=lambda r: (-r[0], r[1]))
    matched_gt = {frame: set() for frame in gts_per_frame}
    confidences, is_tp, assignments = [], [], []
    num_gt = sum(len(g) for g in gts_per_frame.values())
    for conf, _order, frame, det_idx in records:
        box = dets_per_frame[frame][det_idx][0]
        gts = gts_per_frame.get(frame, [])
        best_iou, best_gt = 0.0, None
        for gi, gt in enumerate(gts):
            if gi in matched_gt.setdefault(frame, set()):
                continue
            v = iou(box, gt)
            if v >= iou_thr and v > best_iou:
                best_iou, best_gt = v, gi
        confidences.append(conf)
        if best_gt is not None:
            matched_gt[frame].add(best_gt)
            is_tp.append(True)
            assignments.append((frame, det_idx, best_gt))
        else:
            is_tp.append(False)
    return MatchResult(
        confidences=np.asarray(confidences, dtype=float),
        is_tp=np.asarray(is_tp, dtype=bool),
        num_gt=num_gt,
        assignments=assignments,
    )


def prf1(match: MatchResult, conf_threshold=0.0):
    """Precision, recall, F1 over detections at or above the threshold."""
    keep = match.confidences >= conf_threshold
    tp = int(match.is_tp[keep].sum())
    n_det = int(keep.sum())
    p = tp / n_det if n_det else 0.0
    r = tp / match.num_gt if match.num_gt else 0.0
    f1 = 2 * p * r / (p + r) if (p + r) else 0.0
    return p, r, f1


def best_f1_threshold(match: MatchResult):
    """Confidence threshold maximizing F1 (the reported operating point)."""
    best = (0.0, 0.0)  # (f1, threshold)
    for conf in np.unique(match.confidences):
        f1 = prf1(match, conf)[2]
        if f1 > best[0]:
            best = (f1, float(conf))
    return best[1]


def ap50(match: MatchResult):
    """All-point interpolated average precision.

    Sweeps the confidence ranking, takes the precision envelope (running max
    from the right) and integrates it over recall.
    """
    if match.num_gt == 0:
        raise ValueError("AP undefined with zero ground truths")
    if len(match.confidences) == 0:
        return 0.0
    tp_cum = np.cumsum(match.is_tp)
    fp_cum = np.cumsum(~match.is_tp)
    recall = tp_cum / match.num_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # envelope: precision at recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        if r > r_prev:
            ap += (r - r_prev) * p
            r_prev = r
    return float(ap)


def pr_curve(match: MatchResult):
    """(recall, precision) arrays along the confidence sweep, for plotting."""
    if len(match.confidences) == 0:
        return np.array([0.0]), np.array([0.0])
    tp_cum = np.cumsum(match.is_tp)
    fp_cum = np.cumsum(~match.is_tp)
    recall = tp_cum / max(match.num_gt, 1)
    precision = tp_cum / (tp_cum + fp_cum)
    return recall, precision


def evaluation_summary(dets_per_frame, gts_per_frame, iou_thr=0.5):
    """Pooled AP50 plus P/R/F1 at the best-F1 operating point.

    Returns (summary dict, (recall, precision) curve arrays).
    """
    match = match_detections(dets_per_frame, gts_per_frame, iou_thr=iou_thr)
    thr = best_f1_threshold(match)
    p, r, f1 = prf1(match, thr)
    summary = {
        "ap50": ap50(match),
        "precision": p,
        "recall": r,
        "f1": f1,
        "conf_threshold": thr,
        "num_detections": int(len(match.confidences)),
        "num_ground_truth": int(match.num_gt),
        "true_positives": match.tp,
    }
    return summary, pr_curve(match)


# -- complexity accounting ---------------------------------------------------
#
# Analytic multiply-add counts; the formula sheet lives in docs/complexity.md.


def conv_macs(out_elems, c_in, k_elems, bias=False):
    """MACs of a convolution producing out_elems outputs from c_in*k_elems taps."""
    return out_elems * (c_in * k_elems + (1 if bias else 0))


def linear_macs(tokens, d_in, d_out, bias=True):
    return tokens * d_out * (d_in + (1 if bias else 0))


def bn_macs(elems):
    """Infer-mode batch norm is one multiply-add per element."""
    return elems


def attention_macs(n_windows, tokens, d, n_h, key_bias=False):
    """One windowed attention pass: projections + scores + weighting."""
    proj = 3 * linear_macs(n_windows * tokens, d, d, bias=True)
    if not key_bias:
        proj -= n_windows * tokens * d  # key projection carries no bias
    scores = n_windows * n_h * tokens * tokens * (d // n_h)
    weighted = n_windows * n_h * tokens * tokens * (d // n_h)
    out = linear_macs(n_windows * tokens, d, d, bias=True)
    return proj + scores + weighted + out


def count_params_flops(model_or_layer, input_shape):
    """(params, MACs) for one forward pass at the given input shape.

    Accepts anything exposing ``count_into(visitor, input_shape)``; the
    tdc-layer types implement it, as does the detector model. Unknown
    objects raise TypeError.
    """
    visitor = CountVisitor()
    counter = getattr(model_or_layer, "count_into", None)
    if counter is None:
        raise TypeError(f"cannot count {type(model_or_layer).__name__}")
    counter(visitor, input_shape)
    return visitor.params, visitor.macs


class CountVisitor:
    """Accumulates (params, macs) contributions by named component."""

    def __init__(self):
        self.rows = []

    def add(self, name, params, macs):
        self.rows.append((name, int(params), int(macs)))

    @property
    def params(self):
        return sum(r[1] for r in self.rows)

    @property
    def macs(self):
        return sum(r[2] for r in self.rows)

    def table(self):
        lines = [f"{'component':<40} {'params':>12} {'MACs':>16}"]
        for name, p, m in self.rows:
            lines.append(f"{name:<40} {p:>12} {m:>16}")
        lines.append(f"{'total':<40} {self.params:>12} {self.macs:>16}")
        return "\n".join(lines)
