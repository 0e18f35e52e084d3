"""Multiply-add accounting for the inference path.

The convention counts one MAC per scalar multiply-accumulate inside a matrix
product; elementwise normalization, activations, and reductions are excluded.
The analytic formulas below mirror the matmuls the model executes, and the
live counter is fed by the same shapes at call sites, so an instrumented
forward pass reproduces the estimate exactly when every crop holds exactly
``points_per_crop`` points.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

_ACTIVE: list["MacCounter"] = []


class MacCounter:
    """Accumulates multiply-add counts while active."""

    def __init__(self) -> None:
        self.macs = 0


def record_matmul(m: int, k: int, n: int) -> None:
    """Report an (m, k) @ (k, n) product to any active counters."""
    if _ACTIVE:
        macs = int(m) * int(k) * int(n)
        for counter in _ACTIVE:
            counter.macs += macs


@contextmanager
def count_macs():
    """Context manager yielding a :class:`MacCounter` capturing matmul work."""
    counter = MacCounter()
    _ACTIVE.append(counter)
    try:
        yield counter
    finally:
        _ACTIVE.remove(counter)


# ---------------------------------------------------------------------------
# Analytic estimates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlopsBreakdown:
    """Per-stage MAC counts for one frame of inference."""

    featurizer: int
    head: int
    sampling: int
    nms: int

    @property
    def model(self) -> int:
        """Featurizer plus head: the part covered by the live counter."""
        return self.featurizer + self.head

    @property
    def total(self) -> int:
        return self.model + self.sampling + self.nms


def featurizer_macs_per_crop(point_dim: int, block_widths: tuple[int, ...],
                             n_points: int) -> int:
    """Matmul MACs to featurize one crop of exactly ``n_points`` points."""
    if n_points <= 0 or not block_widths:
        return 0
    macs = n_points * point_dim * block_widths[0]
    w_in = block_widths[0]
    for w_out in block_widths:
        macs += n_points * (2 * w_in) * w_out  # layer 1 on concat(features, max)
        macs += n_points * w_out * w_out       # layer 2
        w_in = w_out
    return macs


def head_macs_per_crop(cell_dim: int, n_offsets: int, n_anchor_types: int,
                       n_classes: int, proj_dim: int) -> int:
    """Matmul MACs for one cell feature through projections and heads."""
    macs = n_offsets * cell_dim * proj_dim
    macs += n_offsets * n_anchor_types * proj_dim * (n_classes + 1)
    macs += n_offsets * n_anchor_types * proj_dim * 7
    return macs


def sampling_macs(num_centers: int, eligible_points: int) -> int:
    """Nominal cost of farthest point sampling: 2 MACs per point per pick."""
    return 2 * num_centers * eligible_points


def nms_macs(candidate_detections: int) -> int:
    """Nominal oriented-overlap cost at 100 MACs per candidate pair."""
    return 100 * candidate_detections * candidate_detections


def estimate(
    point_dim: int,
    block_widths: tuple[int, ...],
    n_offsets: int,
    n_anchor_types: int,
    n_classes: int,
    proj_dim: int,
    num_centers: int,
    points_per_crop: int,
    eligible_points: int = 0,
    candidate_detections: int = 0,
) -> FlopsBreakdown:
    """Analytic per-frame MAC breakdown; the model part is exact by design."""
    cell_dim = int(sum(block_widths))
    return FlopsBreakdown(
        featurizer=num_centers
        * featurizer_macs_per_crop(point_dim, block_widths, points_per_crop),
        head=num_centers
        * head_macs_per_crop(cell_dim, n_offsets, n_anchor_types, n_classes, proj_dim),
        sampling=sampling_macs(num_centers, eligible_points),
        nms=nms_macs(candidate_detections),
    )
