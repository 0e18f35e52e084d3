"""Score filtering and greedy oriented non-maximal suppression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box3D, bev_iou_matrix, boxes_to_array


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    class_id: int = 0

    def __post_init__(self) -> None:
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")


def score_filter(dets: list[Detection], min_score: float) -> list[Detection]:
    """Keep detections scoring at least ``min_score``, preserving order."""
    if not 0.0 <= min_score <= 1.0:
        raise ValueError("min_score must lie in [0, 1]")
    return [d for d in dets if d.score >= min_score]


def oriented_nms(
    dets: list[Detection],
    iou_thresh: float = 0.5,
    max_out: int = 512,
) -> list[Detection]:
    """Greedy NMS on rotated footprints, independently per class.

    Repeatedly keeps the highest-score remaining detection (ties broken by
    lower input index) and discards same-class detections whose BEV IoU with
    it exceeds ``iou_thresh``. Detections of different classes never suppress
    each other. Stops after ``max_out`` kept detections.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie strictly between 0 and 1")
    if not dets:
        return []
    boxes = boxes_to_array([d.box for d in dets])
    scores = np.array([d.score for d in dets])
    classes = np.array([d.class_id for d in dets])
    # sort by descending score, stable in input index for ties
    order = sorted(range(len(dets)), key=lambda i: (-scores[i], i))
    alive = np.ones(len(dets), dtype=bool)
    kept: list[int] = []
    for i in order:
        if not alive[i]:
            continue
        kept.append(i)
        if len(kept) >= max_out:
            break
        rest = [j for j in order if alive[j] and j != i and classes[j] == classes[i]]
        if rest:
            ious = bev_iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            for j, iou in zip(rest, ious):
                if iou > iou_thresh:
                    alive[j] = False
        alive[i] = False
    return [dets[i] for i in kept]
