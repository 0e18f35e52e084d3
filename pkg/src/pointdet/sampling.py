"""Proposal center selection: z-filtering, random sampling, farthest point
sampling with optional seeds, and temporal seeding from previous detections.

All samplers draw proposals from actual point locations, so no proposal lies
in empty space. Distances are measured in the x-y plane throughout.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box3D, PointCloud, Pose2D, apply_pose_box


class CenterSource(enum.Enum):
    RANDOM = "random"
    FPS = "fps"
    TEMPORAL_SEED = "temporal_seed"


@dataclass(frozen=True)
class CenterProposal:
    """An (x, y) location around which detection computation is targeted."""

    x: float
    y: float
    source: CenterSource


@dataclass(frozen=True)
class ZRange:
    """Height interval from which sampling is allowed; bounds may be infinite."""

    z_min: float
    z_max: float

    def __post_init__(self) -> None:
        if not self.z_min < self.z_max:
            raise ValueError(f"degenerate z-range [{self.z_min}, {self.z_max}]")


FULL_Z_RANGE = ZRange(-math.inf, math.inf)


def z_filter(cloud: PointCloud, zrange: ZRange) -> np.ndarray:
    """Indices of points with z inside ``zrange`` (bounds inclusive).

    Filtered-out points are excluded from sampling only; they stay in the
    cloud for cropping and featurization.
    """
    z = cloud.xyz[:, 2]
    return np.nonzero((z >= zrange.z_min) & (z <= zrange.z_max))[0]


def percentile_z_range(label_boxes: list[Box3D], p_lo: float, p_hi: float) -> ZRange:
    """ZRange spanning the p_lo-th to p_hi-th percentile of label center z.

    Percentiles use linear interpolation between order statistics. Raises if
    the label set is empty or the percentiles collapse to a degenerate range.
    """
    if not label_boxes:
        raise ValueError("cannot compute a z-range from an empty label set")
    if not (0 <= p_lo < p_hi <= 100):
        raise ValueError(f"invalid percentile pair ({p_lo}, {p_hi})")
    cz = np.array([b.cz for b in label_boxes])
    lo, hi = np.percentile(cz, [p_lo, p_hi])
    return ZRange(float(lo), float(hi))


def random_uniform_centers(
    cloud: PointCloud,
    eligible: np.ndarray,
    n: int,
    rng: np.random.Generator,
) -> list[CenterProposal]:
    """Draw ``n`` proposal centers uniformly from the eligible point indices.

    Sampling is without replacement; if ``n`` exceeds the eligible count it
    switches to with-replacement so the batch contract stays fixed-size.
    """
    eligible = np.asarray(eligible, dtype=int)
    if n < 1:
        raise ValueError("need at least one center")
    if len(eligible) == 0:
        raise ValueError("no eligible points to sample from")
    replace = n > len(eligible)
    picks = rng.choice(eligible, size=n, replace=replace)
    xy = cloud.xyz[picks, :2]
    return [CenterProposal(float(x), float(y), CenterSource.RANDOM) for x, y in xy]


def farthest_point_centers(
    cloud: PointCloud,
    eligible: np.ndarray,
    n: int,
    seeds: list[CenterProposal] | None = None,
    rng: np.random.Generator | None = None,
    first_index: int | None = None,
) -> list[CenterProposal]:
    """Greedy farthest point sampling of ``n`` new centers in the x-y plane.

    Seeds count toward the min-distance set but are not re-emitted. With no
    seeds the first pick is a uniformly random eligible point (rng required)
    unless ``first_index`` pins it, after which the sequence is deterministic.
    Ties in the argmax go to the lowest index. If the eligible set runs out,
    the selection repeats cyclically to honor the requested count.
    """
    eligible = np.asarray(eligible, dtype=int)
    if n < 1:
        raise ValueError("need at least one center")
    if len(eligible) == 0:
        raise ValueError("no eligible points to sample from")
    xy = cloud.xyz[eligible, :2]
    m = len(eligible)
    seeds = seeds or []

    min_d2 = np.full(m, np.inf)
    for seed in seeds:
        d2 = (xy[:, 0] - seed.x) ** 2 + (xy[:, 1] - seed.y) ** 2
        np.minimum(min_d2, d2, out=min_d2)

    chosen: list[int] = []
    for step in range(min(n, m)):
        if step == 0 and not seeds:
            if first_index is not None:
                idx = int(first_index)
            elif rng is not None:
                idx = int(rng.integers(m))
            else:
                raise ValueError("rng or first_index required without seeds")
        else:
            idx = int(np.argmax(min_d2))  # argmax takes the lowest tied index
        chosen.append(idx)
        d2 = (xy[:, 0] - xy[idx, 0]) ** 2 + (xy[:, 1] - xy[idx, 1]) ** 2
        np.minimum(min_d2, d2, out=min_d2)

    # Eligible set exhausted: pad by cycling the selection.
    out_idx = [chosen[i % len(chosen)] for i in range(n)]
    return [
        CenterProposal(float(xy[i, 0]), float(xy[i, 1]), CenterSource.FPS)
        for i in out_idx
    ]


def temporal_seeds(
    prev_detections: list[tuple[Box3D, float]],
    pose_delta: Pose2D,
    k: int,
) -> list[CenterProposal]:
    """Seed centers from the k highest-score previous detections.

    Boxes are pose-corrected into the current frame before their centers are
    taken. Returns fewer than k seeds when fewer detections are available.
    """
    if k < 0:
        raise ValueError("seed count must be non-negative")
    if k == 0 or not prev_detections:
        return []
    order = sorted(
        range(len(prev_detections)),
        key=lambda i: (-prev_detections[i][1], i),
    )
    seeds = []
    for i in order[:k]:
        box = apply_pose_box(pose_delta, prev_detections[i][0])
        seeds.append(CenterProposal(box.cx, box.cy, CenterSource.TEMPORAL_SEED))
    return seeds
