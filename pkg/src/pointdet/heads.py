"""Anchor grids around proposal centers, the detection head, target
assignment, and training losses with analytic gradients.

Anchors are placed on a G x G offset grid relative to each (data-dependent)
center; every offset carries one anchor per (rotation, dimension-prior) pair.
The head projects a cell feature to a per-offset latent with a separate
learned projection per offset, then shared per-anchor-type linear heads emit
class logits and the 7 box-residual outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import flops
from .geometry import Box3D, bev_iou_matrix, wrap_angle_array
from .sampling import CenterProposal

BACKGROUND_FORCED_LOGIT = 30.0


@dataclass(frozen=True)
class AnchorConfig:
    """Geometry of the per-center anchor grid and the head's latent width."""

    grid_size: int = 11
    grid_extent: float = 1.0
    rotations: tuple[float, ...] = (0.0, math.pi / 4)
    dim_priors: tuple[tuple[float, float, float], ...] = ((0.9, 0.9, 1.75),)
    z_priors: tuple[float, ...] = (0.875,)
    proj_dim: int = 32

    def __post_init__(self) -> None:
        if self.grid_size < 1:
            raise ValueError("grid_size must be at least 1")
        if self.grid_extent < 0:
            raise ValueError("grid_extent must be non-negative")
        if len(self.z_priors) != len(self.dim_priors):
            raise ValueError("need one z prior per dimension prior")
        for dims in self.dim_priors:
            if min(dims) <= 0:
                raise ValueError("dimension priors must be positive")

    @property
    def n_offsets(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def n_anchor_types(self) -> int:
        return len(self.rotations) * len(self.dim_priors)

    @property
    def anchors_per_center(self) -> int:
        return self.n_offsets * self.n_anchor_types

    def offsets(self) -> np.ndarray:
        """(G*G, 2) grid offsets spanning [-extent, +extent] per axis."""
        if self.grid_size == 1:
            ticks = np.array([0.0])
        else:
            ticks = np.linspace(-self.grid_extent, self.grid_extent, self.grid_size)
        gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


@dataclass(frozen=True)
class Anchor:
    box: Box3D
    offset_index: int


def anchor_types(cfg: AnchorConfig) -> np.ndarray:
    """(T, 5) array of [length, width, height, z, rotation] per anchor type."""
    rows = []
    for rot in cfg.rotations:
        for dims, z in zip(cfg.dim_priors, cfg.z_priors):
            rows.append([dims[0], dims[1], dims[2], z, rot])
    return np.array(rows)


def anchor_grid(centers_xy: np.ndarray, cfg: AnchorConfig) -> np.ndarray:
    """All anchors for (B, 2) centers -> (B, A, 7) with A = offsets x types.

    Flat anchor index is ``offset_index * n_anchor_types + type_index``,
    matching the head's output layout.
    """
    centers_xy = np.asarray(centers_xy, dtype=float).reshape(-1, 2)
    offs = cfg.offsets()
    types = anchor_types(cfg)
    b, o, t = len(centers_xy), len(offs), len(types)
    out = np.zeros((b, o * t, 7))
    xy = centers_xy[:, None, None, :2] + offs[None, :, None, :]
    xy = np.broadcast_to(xy, (b, o, t, 2))
    out[:, :, 0] = xy[..., 0].reshape(b, -1)
    out[:, :, 1] = xy[..., 1].reshape(b, -1)
    out[:, :, 2] = np.tile(types[None, None, :, 3], (b, o, 1)).reshape(b, -1)
    for d in range(3):
        out[:, :, 3 + d] = np.tile(types[None, None, :, d], (b, o, 1)).reshape(b, -1)
    out[:, :, 6] = np.tile(types[None, None, :, 4], (b, o, 1)).reshape(b, -1)
    return out


def build_anchors(center: CenterProposal, cfg: AnchorConfig) -> list[Anchor]:
    """Anchors for a single proposal center as typed objects."""
    arr = anchor_grid(np.array([[center.x, center.y]]), cfg)[0]
    t = cfg.n_anchor_types
    return [
        Anchor(box=Box3D.from_array(row), offset_index=i // t)
        for i, row in enumerate(arr)
    ]


# ---------------------------------------------------------------------------
# Head parameters and forward/backward
# ---------------------------------------------------------------------------

@dataclass
class HeadParams:
    proj_weight: np.ndarray  # (O, cell_dim, D)
    proj_bias: np.ndarray    # (O, D)
    cls_weight: np.ndarray   # (T, D, n_classes + 1)
    cls_bias: np.ndarray     # (T, n_classes + 1)
    reg_weight: np.ndarray   # (T, D, 7)
    reg_bias: np.ndarray     # (T, 7)

    @property
    def n_offsets(self) -> int:
        return self.proj_weight.shape[0]

    @property
    def cell_dim(self) -> int:
        return self.proj_weight.shape[1]

    @property
    def proj_dim(self) -> int:
        return self.proj_weight.shape[2]

    @property
    def n_anchor_types(self) -> int:
        return self.cls_weight.shape[0]

    @property
    def n_classes(self) -> int:
        return self.cls_weight.shape[2] - 1

    def named_arrays(self, trainable_only: bool = False):
        yield "head.proj_weight", self.proj_weight
        yield "head.proj_bias", self.proj_bias
        yield "head.cls_weight", self.cls_weight
        yield "head.cls_bias", self.cls_bias
        yield "head.reg_weight", self.reg_weight
        yield "head.reg_bias", self.reg_bias

    def astype(self, dtype) -> "HeadParams":
        return HeadParams(
            proj_weight=self.proj_weight.astype(dtype),
            proj_bias=self.proj_bias.astype(dtype),
            cls_weight=self.cls_weight.astype(dtype),
            cls_bias=self.cls_bias.astype(dtype),
            reg_weight=self.reg_weight.astype(dtype),
            reg_bias=self.reg_bias.astype(dtype),
        )


def init_head(
    cfg: AnchorConfig,
    cell_dim: int,
    n_classes: int = 1,
    rng: np.random.Generator | None = None,
    background_prior_logit: float = 4.0,
) -> HeadParams:
    """Fresh head parameters. The background bias starts positive so early
    training is not swamped by confident false positives."""
    rng = rng or np.random.default_rng(0)
    o, t, d = cfg.n_offsets, cfg.n_anchor_types, cfg.proj_dim
    cls_bias = np.zeros((t, n_classes + 1))
    cls_bias[:, n_classes] = background_prior_logit
    return HeadParams(
        proj_weight=rng.normal(0.0, 1.0 / math.sqrt(cell_dim), size=(o, cell_dim, d)),
        proj_bias=np.zeros((o, d)),
        cls_weight=rng.normal(0.0, 1.0 / math.sqrt(d), size=(t, d, n_classes + 1)),
        cls_bias=cls_bias,
        reg_weight=rng.normal(0.0, 1.0 / math.sqrt(d), size=(t, d, 7)),
        reg_bias=np.zeros((t, 7)),
    )


@dataclass
class HeadCache:
    cell: np.ndarray
    proj_out: np.ndarray
    suppressed: np.ndarray


def head_forward_batch(
    cell: np.ndarray,
    params: HeadParams,
    suppressed: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, HeadCache]:
    """Head outputs for (B, cell_dim) features.

    Returns class logits (B, O, T, C+1), regression outputs (B, O, T, 7), and
    the cache for backward. Rows flagged ``suppressed`` (empty crops) get
    background-forced logits and zero regression, and pass no gradient.
    """
    cell = np.asarray(cell, dtype=params.proj_weight.dtype)
    b = cell.shape[0]
    if cell.ndim != 2 or cell.shape[1] != params.cell_dim:
        raise ValueError(
            f"cell features {cell.shape} do not match head cell_dim {params.cell_dim}"
        )
    if suppressed is None:
        suppressed = np.zeros(b, dtype=bool)
    o, d, t = params.n_offsets, params.proj_dim, params.n_anchor_types
    c1 = params.n_classes + 1
    # flatten the per-offset / per-type contractions into single BLAS matmuls
    proj_flat = params.proj_weight.transpose(1, 0, 2).reshape(params.cell_dim, o * d)
    proj = (cell @ proj_flat).reshape(b, o, d) + params.proj_bias
    proj2 = proj.reshape(b * o, d)
    cls_flat = params.cls_weight.transpose(1, 0, 2).reshape(d, t * c1)
    reg_flat = params.reg_weight.transpose(1, 0, 2).reshape(d, t * 7)
    cls = (proj2 @ cls_flat).reshape(b, o, t, c1) + params.cls_bias
    reg = (proj2 @ reg_flat).reshape(b, o, t, 7) + params.reg_bias
    flops.record_matmul(b, params.cell_dim, o * d)
    flops.record_matmul(b * o, d, t * c1)
    flops.record_matmul(b * o, d, t * 7)
    if suppressed.any():
        cls[suppressed] = 0.0
        cls[suppressed, :, :, params.n_classes] = BACKGROUND_FORCED_LOGIT
        reg[suppressed] = 0.0
    return cls, reg, HeadCache(cell=cell, proj_out=proj, suppressed=suppressed)


def head_forward(
    cell_feature: np.ndarray, params: HeadParams, suppressed: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Single-cell head outputs flattened per anchor: (A, C+1) and (A, 7)."""
    cls, reg, _ = head_forward_batch(
        np.asarray(cell_feature, dtype=float).reshape(1, -1),
        params,
        np.array([suppressed]),
    )
    c = params.n_classes + 1
    return cls[0].reshape(-1, c), reg[0].reshape(-1, 7)


def head_backward(
    params: HeadParams,
    cache: HeadCache,
    d_cls: np.ndarray,
    d_reg: np.ndarray,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of head parameters and of the cell features."""
    d_cls = np.asarray(d_cls, dtype=params.proj_weight.dtype)
    d_reg = np.asarray(d_reg, dtype=params.proj_weight.dtype)
    if cache.suppressed.any():
        d_cls = d_cls.copy()
        d_reg = d_reg.copy()
        d_cls[cache.suppressed] = 0.0
        d_reg[cache.suppressed] = 0.0
    b = d_cls.shape[0]
    o, d, t = params.n_offsets, params.proj_dim, params.n_anchor_types
    c1 = params.n_classes + 1
    f = params.cell_dim
    proj2 = cache.proj_out.reshape(b * o, d)
    d_cls2 = d_cls.reshape(b * o, t * c1)
    d_reg2 = d_reg.reshape(b * o, t * 7)
    grads = {
        "head.cls_weight": (proj2.T @ d_cls2).reshape(d, t, c1).transpose(1, 0, 2),
        "head.cls_bias": d_cls.sum(axis=(0, 1)),
        "head.reg_weight": (proj2.T @ d_reg2).reshape(d, t, 7).transpose(1, 0, 2),
        "head.reg_bias": d_reg.sum(axis=(0, 1)),
    }
    cls_flat = params.cls_weight.transpose(1, 0, 2).reshape(d, t * c1)
    reg_flat = params.reg_weight.transpose(1, 0, 2).reshape(d, t * 7)
    d_proj = (d_cls2 @ cls_flat.T + d_reg2 @ reg_flat.T).reshape(b, o * d)
    grads["head.proj_weight"] = (
        (cache.cell.T @ d_proj).reshape(f, o, d).transpose(1, 0, 2)
    )
    grads["head.proj_bias"] = d_proj.reshape(b, o, d).sum(axis=0)
    proj_flat = params.proj_weight.transpose(1, 0, 2).reshape(f, o * d)
    d_cell = d_proj @ proj_flat.T
    return grads, d_cell


# ---------------------------------------------------------------------------
# Residual encoding
# ---------------------------------------------------------------------------

def encode_residual_array(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Residual 7-vectors (dx, dy, dz, dl, dw, dh, dtheta) for box arrays.

    Plane offsets are normalized by the anchor footprint diagonal, the height
    offset by the anchor height, sizes are log ratios, and the heading
    residual is the wrapped angular difference.
    """
    gt = np.atleast_2d(np.asarray(gt, dtype=float))
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    out = np.zeros((len(gt), 7))
    out[:, 0] = (gt[:, 0] - anchors[:, 0]) / diag
    out[:, 1] = (gt[:, 1] - anchors[:, 1]) / diag
    out[:, 2] = (gt[:, 2] - anchors[:, 2]) / anchors[:, 5]
    out[:, 3] = np.log(gt[:, 3] / anchors[:, 3])
    out[:, 4] = np.log(gt[:, 4] / anchors[:, 4])
    out[:, 5] = np.log(gt[:, 5] / anchors[:, 5])
    out[:, 6] = wrap_angle_array(gt[:, 6] - anchors[:, 6])
    return out


def decode_residual_array(res: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_residual_array`; headings are re-wrapped."""
    res = np.atleast_2d(np.asarray(res, dtype=float))
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    out = np.zeros((len(res), 7))
    out[:, 0] = anchors[:, 0] + res[:, 0] * diag
    out[:, 1] = anchors[:, 1] + res[:, 1] * diag
    out[:, 2] = anchors[:, 2] + res[:, 2] * anchors[:, 5]
    out[:, 3] = anchors[:, 3] * np.exp(res[:, 3])
    out[:, 4] = anchors[:, 4] * np.exp(res[:, 4])
    out[:, 5] = anchors[:, 5] * np.exp(res[:, 5])
    out[:, 6] = wrap_angle_array(anchors[:, 6] + res[:, 6])
    return out


def encode_residuals(gt: Box3D, anchor: Box3D) -> np.ndarray:
    return encode_residual_array(gt.as_array(), anchor.as_array())[0]


def decode_residuals(res: np.ndarray, anchor: Box3D) -> Box3D:
    return Box3D.from_array(decode_residual_array(res, anchor.as_array())[0])


# ---------------------------------------------------------------------------
# Target assignment
# ---------------------------------------------------------------------------

FOREGROUND = 1
BACKGROUND = 0
IGNORED = -1


@dataclass
class Assignment:
    """Per-anchor labels (1 fg / 0 bg / -1 ignored) with matched objects."""

    labels: np.ndarray
    matched_gt: np.ndarray
    target_class: np.ndarray
    reg_targets: np.ndarray

    @property
    def n_foreground(self) -> int:
        return int(np.count_nonzero(self.labels == FOREGROUND))


def assign_targets(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray | None = None,
    fg_threshold: float = 0.6,
    bg_threshold: float = 0.45,
) -> Assignment:
    """Match anchors to objects by BEV IoU with an ignore band and force-matching.

    Anchors above ``fg_threshold`` are foreground for their best object and
    below ``bg_threshold`` background; the band between is ignored. Any object
    left without a foreground anchor is force-matched to its best-overlapping
    anchor when that anchor is free and the overlap is nonzero; when two
    objects want the same free anchor the lower object index wins.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 7)
    a = len(anchors)
    labels = np.zeros(a, dtype=np.int8)
    matched = np.full(a, -1, dtype=int)
    target_class = np.full(a, -1, dtype=int)
    reg_targets = np.zeros((a, 7))
    if gt_classes is None:
        gt_classes = np.zeros(len(gt_boxes), dtype=int)
    if len(gt_boxes) == 0:
        return Assignment(labels, matched, target_class, reg_targets)

    iou = bev_iou_matrix(anchors, gt_boxes)
    best_iou = iou.max(axis=1)
    best_gt = iou.argmax(axis=1)

    labels[(best_iou >= bg_threshold) & (best_iou <= fg_threshold)] = IGNORED
    fg = best_iou > fg_threshold
    labels[fg] = FOREGROUND
    matched[fg] = best_gt[fg]

    for j in range(len(gt_boxes)):
        if np.any(matched[labels == FOREGROUND] == j):
            continue
        i = int(iou[:, j].argmax())
        if iou[i, j] > 0.0 and labels[i] != FOREGROUND:
            labels[i] = FOREGROUND
            matched[i] = j

    fg_mask = labels == FOREGROUND
    if fg_mask.any():
        reg_targets[fg_mask] = encode_residual_array(
            gt_boxes[matched[fg_mask]], anchors[fg_mask]
        )
        target_class[fg_mask] = gt_classes[matched[fg_mask]]
    return Assignment(labels, matched, target_class, reg_targets)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def smooth_l1(pred: float, target: float, delta: float = 1.0) -> float:
    """Huber-style loss: quadratic within ``delta`` of zero error, linear outside."""
    vals, _ = smooth_l1_terms(np.array([pred - target]), delta)
    return float(vals[0])


def smooth_l1_terms(err: np.ndarray, delta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise smooth-L1 of an error array -> (values, d/d_err)."""
    err = np.asarray(err, dtype=float)
    if not np.all(np.isfinite(err)):
        raise ValueError("smooth-L1 requires finite inputs")
    small = np.abs(err) < delta
    vals = np.where(small, 0.5 * err * err / delta, np.abs(err) - 0.5 * delta)
    grads = np.where(small, err / delta, np.sign(err))
    return vals, grads


def heading_loss(pred_dtheta: float, target_dtheta: float, mode: str = "sine") -> float:
    """Heading residual loss. ``sine`` is direction invariant; ``wrapped``
    penalizes the wrapped angular difference and is direction aware."""
    vals, _ = heading_terms(
        np.array([pred_dtheta]), np.array([target_dtheta]), mode
    )
    return float(vals[0])


def heading_terms(
    pred: np.ndarray, target: np.ndarray, mode: str, delta: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise heading loss -> (values, d/d_pred)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    diff = pred - target
    if mode == "sine":
        vals, g = smooth_l1_terms(np.sin(diff), delta)
        return vals, g * np.cos(diff)
    if mode == "wrapped":
        vals, g = smooth_l1_terms(wrap_angle_array(diff), delta)
        return vals, g
    raise ValueError(f"unknown heading loss mode {mode!r}")


def focal_loss(
    class_logits: np.ndarray,
    labels: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
    normalizer: float | None = None,
) -> float:
    """Focal cross-entropy summed over anchors and divided by the foreground
    count (minimum 1) unless an explicit normalizer is given.

    ``labels`` holds the target class index per row, with the last logit
    column denoting background; foreground rows weigh ``alpha`` and
    background rows ``1 - alpha``.
    """
    vals, _ = focal_terms(class_logits, labels, alpha, gamma)
    n_classes = np.asarray(class_logits).shape[-1] - 1
    if normalizer is None:
        normalizer = max(1, int(np.count_nonzero(np.asarray(labels) != n_classes)))
    return float(vals.sum() / normalizer)


def focal_terms(
    logits: np.ndarray, labels: np.ndarray, alpha: float, gamma: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row focal loss values and gradients w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    m, c = logits.shape
    background = c - 1
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    p = np.exp(log_p)
    rows = np.arange(m)
    log_pt = log_p[rows, labels]
    pt = p[rows, labels]
    alpha_t = np.where(labels == background, 1.0 - alpha, alpha)
    u = 1.0 - pt
    vals = -alpha_t * np.power(u, gamma) * log_pt
    # d/d_z = alpha_t * (delta - p) * (gamma * pt * u^(gamma-1) * log_pt - u^gamma)
    if gamma == 0.0:
        inner = -np.ones_like(pt)
    else:
        safe_u = np.where(u > 1e-12, u, 1.0)
        inner = np.where(
            u > 1e-12,
            gamma * pt * np.power(safe_u, gamma - 1.0) * log_pt - np.power(u, gamma),
            0.0,
        )
    delta = np.zeros((m, c))
    delta[rows, labels] = 1.0
    grads = alpha_t[:, None] * (delta - p) * inner[:, None]
    return vals, grads


@dataclass
class LossBreakdown:
    total: float
    classification: float
    localization: float
    n_foreground: int


def total_loss(
    cls_logits: np.ndarray,
    reg_out: np.ndarray,
    assignment: Assignment,
    heading_mode: str = "sine",
    focal_alpha: float = 0.25,
    focal_gamma: float = 2.0,
    smooth_l1_delta: float = 1.0,
    cls_weight: float = 1.0,
    loc_weight: float = 2.0,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Classification + localization loss over flat per-anchor outputs.

    Args:
        cls_logits: (A, C+1) logits for every anchor in the step.
        reg_out: (A, 7) regression outputs.
        assignment: labels and targets aligned with the anchor rows.

    Returns:
        (breakdown, d_loss/d_cls_logits, d_loss/d_reg_out); gradients are
        zero for ignored anchors and for regression rows of non-foreground
        anchors.
    """
    cls_logits = np.asarray(cls_logits, dtype=float).reshape(-1, np.asarray(cls_logits).shape[-1])
    reg_out = np.asarray(reg_out, dtype=float).reshape(-1, 7)
    labels = assignment.labels
    if len(labels) != len(cls_logits) or len(labels) != len(reg_out):
        raise ValueError("assignment does not match the prediction rows")
    n_classes = cls_logits.shape[1] - 1

    d_cls = np.zeros_like(cls_logits)
    d_reg = np.zeros_like(reg_out)
    fg = labels == FOREGROUND
    valid = labels != IGNORED
    n_fg = max(1, int(fg.sum()))

    cls_value = 0.0
    if valid.any():
        targets = np.where(
            fg[valid], np.maximum(assignment.target_class[valid], 0), n_classes
        )
        vals, grads = focal_terms(cls_logits[valid], targets, focal_alpha, focal_gamma)
        cls_value = float(vals.sum()) / n_fg
        d_cls[valid] = grads * (cls_weight / n_fg)

    loc_value = 0.0
    if fg.any():
        pred = reg_out[fg]
        tgt = assignment.reg_targets[fg]
        vals, grads = smooth_l1_terms(pred[:, :6] - tgt[:, :6], smooth_l1_delta)
        h_vals, h_grads = heading_terms(pred[:, 6], tgt[:, 6], heading_mode, smooth_l1_delta)
        loc_value = (float(vals.sum()) + float(h_vals.sum())) / n_fg
        scale = loc_weight / n_fg
        d_fg = np.concatenate([grads, h_grads[:, None]], axis=1) * scale
        d_reg[fg] = d_fg

    breakdown = LossBreakdown(
        total=cls_weight * cls_value + loc_weight * loc_value,
        classification=cls_value,
        localization=loc_value,
        n_foreground=int(fg.sum()),
    )
    return breakdown, d_cls, d_reg
