"""Detection metrics: proposal coverage, interpolated average precision,
heading-weighted AP, and range-bucketed breakdowns.

Matching is greedy one-to-one in descending score order using BEV IoU.
Ground-truth objects with fewer observed points than the difficulty filter
are dropped before matching; detections are never dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import bev_iou_matrix, wrap_angle_array

DEFAULT_RANGE_BUCKETS = ((0.0, 30.0), (30.0, 50.0), (50.0, math.inf))


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    min_points: int = 5
    range_buckets: tuple[tuple[float, float], ...] = DEFAULT_RANGE_BUCKETS
    recall_sample_points: int = 101

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError("iou_threshold must lie in (0, 1)")
        for (lo, hi), (lo2, _) in zip(self.range_buckets, self.range_buckets[1:]):
            if hi != lo2:
                raise ValueError("range buckets must tile [0, inf) contiguously")


@dataclass
class PRCurve:
    """Precision/recall points in descending-score order with thresholds."""

    recalls: np.ndarray
    precisions: np.ndarray
    scores: np.ndarray


def pr_curve(tp_flags: np.ndarray, scores: np.ndarray, num_gt: int,
             weights: np.ndarray | None = None) -> PRCurve:
    """Raw precision/recall curve from score-ordered match flags.

    Recall is non-decreasing along the curve. ``weights`` optionally scales
    each true positive's contribution (used for heading-weighted AP).
    """
    if num_gt < 1:
        raise ValueError("need at least one ground-truth object")
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if weights is None:
        weights = tp_flags.astype(float)
    tp_cum = np.cumsum(weights)
    ranks = np.arange(1, len(tp_flags) + 1)
    return PRCurve(
        recalls=tp_cum / num_gt,
        precisions=tp_cum / ranks,
        scores=np.asarray(scores, dtype=float),
    )


@dataclass
class FrameEval:
    """Evaluation inputs for one frame: detections plus annotated objects."""

    det_boxes: np.ndarray
    det_scores: np.ndarray
    det_classes: np.ndarray
    gt_boxes: np.ndarray
    gt_classes: np.ndarray
    gt_point_counts: np.ndarray


def coverage(
    gt_boxes: np.ndarray,
    gt_point_counts: np.ndarray,
    proposal_anchor_boxes: np.ndarray,
    min_points: int = 5,
    iou_threshold: float = 0.5,
) -> float:
    """Fraction of well-observed objects overlapped by some proposal anchor.

    An object qualifies when it holds at least ``min_points`` points; it is
    covered when its best BEV IoU against any anchor box exceeds the
    threshold. Raises when no object qualifies.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 7)
    counts = np.asarray(gt_point_counts)
    qualifying = gt_boxes[counts >= min_points]
    if len(qualifying) == 0:
        raise ValueError("no objects pass the min-points filter")
    anchors = np.asarray(proposal_anchor_boxes, dtype=float).reshape(-1, 7)
    if len(anchors) == 0:
        return 0.0
    best = bev_iou_matrix(qualifying, anchors).max(axis=1)
    return float(np.count_nonzero(best > iou_threshold)) / len(qualifying)


def match_detections(
    det_boxes: np.ndarray,
    det_scores: np.ndarray,
    gt_boxes: np.ndarray,
    iou_threshold: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Greedy one-to-one matching in descending score order.

    Returns (scores, tp_flags, heading_errors), all sorted by descending
    score with ties broken by input index. Heading error is the absolute
    wrapped difference for true positives and NaN for false positives.
    """
    det_boxes = np.asarray(det_boxes, dtype=float).reshape(-1, 7)
    det_scores = np.asarray(det_scores, dtype=float)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 7)
    n = len(det_boxes)
    order = sorted(range(n), key=lambda i: (-det_scores[i], i))
    tp = np.zeros(n, dtype=bool)
    heading_err = np.full(n, np.nan)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    if len(gt_boxes) and n:
        iou = bev_iou_matrix(det_boxes, gt_boxes)
        for rank, i in enumerate(order):
            free = ~taken
            if not free.any():
                break
            row = np.where(free, iou[i], -1.0)
            j = int(row.argmax())
            if row[j] > iou_threshold:
                taken[j] = True
                tp[rank] = True
                heading_err[rank] = abs(
                    float(wrap_angle_array(det_boxes[i, 6] - gt_boxes[j, 6]))
                )
    return det_scores[order], tp, heading_err


def _interpolated_ap(recalls: np.ndarray, precisions: np.ndarray,
                     n_samples: int) -> float:
    if len(recalls) == 0:
        return 0.0
    samples = np.linspace(0.0, 1.0, n_samples)
    # precision at recall r: best precision achieved at any recall >= r
    ap = 0.0
    for r in samples:
        mask = recalls >= r - 1e-12
        ap += float(precisions[mask].max()) if mask.any() else 0.0
    return ap / n_samples


def average_precision(
    tp_flags: np.ndarray,
    scores: np.ndarray,
    num_gt: int,
    interpolation_points: int = 101,
) -> float:
    """Area under the interpolated precision-recall curve.

    ``tp_flags`` must already be in descending-score order (as produced by
    :func:`match_detections`).
    """
    if num_gt < 1:
        raise ValueError("need at least one ground-truth object")
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if len(tp_flags) == 0:
        return 0.0
    curve = pr_curve(tp_flags, scores, num_gt)
    return _interpolated_ap(curve.recalls, curve.precisions, interpolation_points)


def heading_weighted_ap(
    tp_flags: np.ndarray,
    heading_errors: np.ndarray,
    scores: np.ndarray,
    num_gt: int,
    interpolation_points: int = 101,
) -> float:
    """AP with each true positive down-weighted by its heading error.

    A true positive contributes ``1 - err/pi`` to the true-positive mass in
    both precision and recall, so a perfect-heading detector recovers AP and
    an anti-aligned one contributes nothing.
    """
    if num_gt < 1:
        raise ValueError("need at least one ground-truth object")
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if len(tp_flags) == 0:
        return 0.0
    err = np.asarray(heading_errors, dtype=float)
    weights = np.where(tp_flags, 1.0 - np.nan_to_num(err) / math.pi, 0.0)
    weights = np.clip(weights, 0.0, 1.0)
    curve = pr_curve(tp_flags, scores, num_gt, weights=weights)
    return _interpolated_ap(curve.recalls, curve.precisions, interpolation_points)


# ---------------------------------------------------------------------------
# Pooled, class- and range-bucketed evaluation
# ---------------------------------------------------------------------------

def _pool_matches(
    frames: list[FrameEval],
    class_id: int,
    config: EvalConfig,
    bucket: tuple[float, float] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Match per frame, pool, and re-sort by score across frames."""
    all_scores, all_tp, all_err = [], [], []
    num_gt = 0
    for frame in frames:
        det_mask = frame.det_classes == class_id
        gt_mask = (frame.gt_classes == class_id) & (
            frame.gt_point_counts >= config.min_points
        )
        det_boxes = frame.det_boxes[det_mask]
        det_scores = frame.det_scores[det_mask]
        gt_boxes = frame.gt_boxes[gt_mask]
        if bucket is not None:
            lo, hi = bucket
            if len(det_boxes):
                d = np.hypot(det_boxes[:, 0], det_boxes[:, 1])
                keep = (d >= lo) & (d < hi)
                det_boxes, det_scores = det_boxes[keep], det_scores[keep]
            if len(gt_boxes):
                d = np.hypot(gt_boxes[:, 0], gt_boxes[:, 1])
                gt_boxes = gt_boxes[(d >= lo) & (d < hi)]
        num_gt += len(gt_boxes)
        scores, tp, err = match_detections(
            det_boxes, det_scores, gt_boxes, config.iou_threshold
        )
        all_scores.append(scores)
        all_tp.append(tp)
        all_err.append(err)
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    err = np.concatenate(all_err) if all_err else np.zeros(0)
    order = np.argsort(-scores, kind="stable")
    return scores[order], tp[order], err[order], num_gt


@dataclass
class MetricRow:
    class_id: int
    bucket: str
    ap: float
    aph: float
    num_gt: int


def evaluate_class(
    frames: list[FrameEval], class_id: int, config: EvalConfig
) -> MetricRow:
    """Pooled AP/APH for one class over all frames."""
    scores, tp, err, num_gt = _pool_matches(frames, class_id, config)
    if num_gt == 0:
        return MetricRow(class_id, "overall", 0.0, 0.0, 0)
    n = config.recall_sample_points
    return MetricRow(
        class_id,
        "overall",
        average_precision(tp, scores, num_gt, n),
        heading_weighted_ap(tp, err, scores, num_gt, n),
        num_gt,
    )


def range_bucketed_eval(
    frames: list[FrameEval], config: EvalConfig
) -> list[MetricRow]:
    """Overall plus per-distance-bucket AP/APH for every class present."""
    class_ids = sorted(
        {int(c) for f in frames for c in f.gt_classes}
        | {int(c) for f in frames for c in f.det_classes}
    )
    rows: list[MetricRow] = []
    for class_id in class_ids:
        rows.append(evaluate_class(frames, class_id, config))
        for lo, hi in config.range_buckets:
            scores, tp, err, num_gt = _pool_matches(
                frames, class_id, config, bucket=(lo, hi)
            )
            name = f"{lo:g}-{hi:g}m" if math.isfinite(hi) else f"{lo:g}m-Inf"
            if num_gt == 0:
                rows.append(MetricRow(class_id, name, 0.0, 0.0, 0))
                continue
            n = config.recall_sample_points
            rows.append(
                MetricRow(
                    class_id,
                    name,
                    average_precision(tp, scores, num_gt, n),
                    heading_weighted_ap(tp, err, scores, num_gt, n),
                    num_gt,
                )
            )
    return rows
