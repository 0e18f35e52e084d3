"""End-to-end orchestration: training, detection, adaptive-compute sweeps,
temporal seeding, and FLOP estimates for concrete configurations.

Per-proposal inference is embarrassingly parallel; detection exposes a
worker-count knob that splits crops into fixed-size chunks so results are
bit-identical for any worker count. Train-time gradient reduction is a
fixed-order sum, so fixed seeds reproduce runs exactly.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import flops
from .evaluation import EvalConfig, FrameEval, evaluate_class
from .featurizer import (
    FeaturizerParams,
    LocalCrop,
    crop_neighborhood,
    featurize_batch,
    featurizer_backward,
    init_featurizer,
)
from .frame import Frame
from .geometry import Box3D, boxes_to_array
from .heads import (
    AnchorConfig,
    Assignment,
    HeadParams,
    IGNORED,
    anchor_grid,
    assign_targets,
    decode_residual_array,
    head_backward,
    head_forward_batch,
    init_head,
    total_loss,
)
from .optim import AdamState, adam_step, exponential_lr
from .postprocess import Detection, oriented_nms, score_filter
from .sampling import (
    CenterProposal,
    ZRange,
    farthest_point_centers,
    random_uniform_centers,
    temporal_seeds,
    z_filter,
)

INFERENCE_CHUNK = 128  # crops per chunk; fixed so results ignore worker count


@dataclass(frozen=True)
class ModelConfig:
    """Architecture plus the classes the model detects."""

    block_widths: tuple[int, ...] = (64, 64, 64, 96, 96)
    point_feature_dim: int = 1
    anchor: AnchorConfig = field(default_factory=AnchorConfig)
    class_ids: tuple[int, ...] = (0,)

    @property
    def point_dim(self) -> int:
        return 3 + self.point_feature_dim

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    @property
    def cell_dim(self) -> int:
        return int(sum(self.block_widths))


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    lr_final_ratio: float = 0.1
    epochs: int = 6
    frames_per_step: int = 1
    centers_per_frame: int = 96
    points_per_crop: int = 64
    crop_radius: float = 2.0
    sampler: str = "fps"
    z_min: float = 0.3
    z_max: float = math.inf
    heading_mode: str = "sine"
    focal_alpha: float = 0.5
    focal_gamma: float = 2.0
    smooth_l1_delta: float = 1.0
    cls_weight: float = 1.0
    loc_weight: float = 2.0
    fg_threshold: float = 0.6
    bg_threshold: float = 0.45
    seed: int = 0
    validation_every: int = 500
    compute_dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 < self.lr_final_ratio <= 1.0:
            raise ValueError("lr_final_ratio must lie in (0, 1]")
        if self.sampler not in ("fps", "random"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError("compute_dtype must be float32 or float64")

    def z_range(self) -> ZRange:
        return ZRange(self.z_min, self.z_max)


@dataclass(frozen=True)
class InferenceConfig:
    num_centers: int = 1024
    points_per_crop: int = 64
    crop_radius: float = 2.0
    sampler: str = "fps"
    temporal_seed_count: int = 0
    z_min: float = 0.3
    z_max: float = math.inf
    score_threshold: float = 0.3
    nms_iou: float = 0.5
    nms_max_out: int = 512
    workers: int = 1

    def __post_init__(self) -> None:
        if self.num_centers < 1:
            raise ValueError("need at least one center")
        if self.temporal_seed_count > self.num_centers:
            raise ValueError("temporal seeds cannot exceed the center budget")
        if self.sampler not in ("fps", "random"):
            raise ValueError(f"unknown sampler {self.sampler!r}")

    def z_range(self) -> ZRange:
        return ZRange(self.z_min, self.z_max)


@dataclass
class Checkpoint:
    model: ModelConfig
    featurizer: FeaturizerParams
    head: HeadParams

    def named_arrays(self, trainable_only: bool = False):
        yield from self.featurizer.named_arrays(trainable_only)
        yield from self.head.named_arrays(trainable_only)

    def astype(self, dtype) -> "Checkpoint":
        """Copy of the checkpoint with every parameter cast to ``dtype``."""
        return Checkpoint(
            model=self.model,
            featurizer=self.featurizer.astype(dtype),
            head=self.head.astype(dtype),
        )


def init_checkpoint(model: ModelConfig, rng: np.random.Generator) -> Checkpoint:
    return Checkpoint(
        model=model,
        featurizer=init_featurizer(model.point_dim, model.block_widths, rng),
        head=init_head(model.anchor, int(sum(model.block_widths)),
                       model.n_classes, rng),
    )


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _sample_centers(
    frame: Frame,
    n: int,
    sampler: str,
    zrange: ZRange,
    rng: np.random.Generator,
    seeds: list[CenterProposal] | None = None,
) -> list[CenterProposal]:
    eligible = z_filter(frame.cloud, zrange)
    if len(eligible) == 0:
        return list(seeds or [])
    if sampler == "fps":
        picked = farthest_point_centers(frame.cloud, eligible, n, seeds=seeds, rng=rng)
    else:
        picked = random_uniform_centers(frame.cloud, eligible, n, rng)
    return list(seeds or []) + picked


def _crops_for_centers(
    frame: Frame,
    centers: list[CenterProposal],
    radius: float,
    k: int,
    seed: int,
) -> list[LocalCrop]:
    crops = []
    for i, center in enumerate(centers):
        crop_rng = np.random.default_rng(np.random.SeedSequence([seed, 919, i]))
        crops.append(crop_neighborhood(frame.cloud, center, radius, k, crop_rng))
    return crops


def _model_labels(frame: Frame, class_ids: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Frame labels restricted to the model's classes, as (boxes, head class idx)."""
    boxes, classes = [], []
    for box, cid in frame.labels:
        if cid in class_ids:
            boxes.append(box)
            classes.append(class_ids.index(cid))
    return boxes_to_array(boxes), np.array(classes, dtype=int)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class StepStats:
    step: int
    lr: float
    loss: float
    classification: float
    localization: float
    n_foreground: int


def training_step(
    checkpoint: Checkpoint,
    frames: list[Frame],
    cfg: TrainConfig,
    centers_per_frame: list[list[CenterProposal]],
    crop_seed: int,
) -> tuple[StepStats, dict[str, np.ndarray]]:
    """Forward/backward over one batch of frames with given proposal centers.

    Returns per-step statistics and gradients for every trainable array.
    Exposed separately from :func:`train` so invariants (translation
    equivariance, locality) can be probed with pinned centers.
    """
    model = checkpoint.model
    all_crops: list[LocalCrop] = []
    labels_parts, matched_parts, class_parts, target_parts = [], [], [], []
    for frame, centers in zip(frames, centers_per_frame):
        crops = _crops_for_centers(
            frame, centers, cfg.crop_radius, cfg.points_per_crop, crop_seed
        )
        all_crops.extend(crops)
        centers_xy = np.array([[c.x, c.y] for c in centers], dtype=float)
        anchors = anchor_grid(centers_xy, model.anchor).reshape(-1, 7)
        gt_boxes, gt_classes = _model_labels(frame, model.class_ids)
        asn = assign_targets(
            anchors, gt_boxes, gt_classes,
            fg_threshold=cfg.fg_threshold, bg_threshold=cfg.bg_threshold,
        )
        # anchors of empty crops carry no evidence: ignore them in the loss
        per_center = model.anchor.anchors_per_center
        empty = np.array([c.actual_count == 0 for c in crops])
        if empty.any():
            asn.labels.reshape(len(centers), per_center)[empty] = IGNORED
        labels_parts.append(asn.labels)
        matched_parts.append(asn.matched_gt)
        class_parts.append(asn.target_class)
        target_parts.append(asn.reg_targets)

    assignment = Assignment(
        labels=np.concatenate(labels_parts),
        matched_gt=np.concatenate(matched_parts),
        target_class=np.concatenate(class_parts),
        reg_targets=np.concatenate(target_parts),
    )

    cell, tape = featurize_batch(all_crops, checkpoint.featurizer, mode="train")
    cls, reg, head_cache = head_forward_batch(cell, checkpoint.head, tape.suppressed)
    breakdown, d_cls, d_reg = total_loss(
        cls.reshape(-1, model.n_classes + 1),
        reg.reshape(-1, 7),
        assignment,
        heading_mode=cfg.heading_mode,
        focal_alpha=cfg.focal_alpha,
        focal_gamma=cfg.focal_gamma,
        smooth_l1_delta=cfg.smooth_l1_delta,
        cls_weight=cfg.cls_weight,
        loc_weight=cfg.loc_weight,
    )
    if not math.isfinite(breakdown.total):
        raise RuntimeError(
            f"non-finite loss (cls={breakdown.classification}, "
            f"loc={breakdown.localization}); aborting training"
        )
    head_grads, d_cell = head_backward(
        checkpoint.head, head_cache, d_cls.reshape(cls.shape), d_reg.reshape(reg.shape)
    )
    feat_grads, _ = featurizer_backward(checkpoint.featurizer, tape, d_cell)
    grads = {**feat_grads, **head_grads}
    stats = StepStats(
        step=0, lr=0.0, loss=breakdown.total,
        classification=breakdown.classification,
        localization=breakdown.localization,
        n_foreground=breakdown.n_foreground,
    )
    return stats, grads


def train(
    frames: list[Frame],
    cfg: TrainConfig,
    model: ModelConfig | None = None,
    val_frames: list[Frame] | None = None,
    val_config: "EvalConfig | None" = None,
    log_fn=None,
    log_path: str | None = None,
) -> Checkpoint:
    """Train a detector on the given frames.

    Each step samples proposal centers per frame, crops and featurizes their
    neighborhoods, assigns anchor targets, and applies one Adam update with
    an exponentially decayed learning rate. A NaN loss aborts the run.
    """
    if not frames:
        raise ValueError("no training frames")
    model = model or ModelConfig(
        point_feature_dim=frames[0].cloud.feature_dim
    )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    checkpoint = init_checkpoint(model, rng).astype(np.dtype(cfg.compute_dtype))
    params = dict(checkpoint.named_arrays(trainable_only=True))
    adam = AdamState()
    zrange = cfg.z_range()

    steps_per_epoch = max(1, math.ceil(len(frames) / cfg.frames_per_step))
    total_steps = cfg.epochs * steps_per_epoch
    log_file = open(log_path, "w") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(frames))
            for start in range(0, len(order), cfg.frames_per_step):
                batch = [frames[i] for i in order[start:start + cfg.frames_per_step]]
                centers = [
                    _sample_centers(f, cfg.centers_per_frame, cfg.sampler, zrange, rng)
                    for f in batch
                ]
                batch = [f for f, c in zip(batch, centers) if c]
                centers = [c for c in centers if c]
                if not batch:
                    continue
                stats, grads = training_step(
                    checkpoint, batch, cfg, centers, crop_seed=cfg.seed + step
                )
                lr = exponential_lr(cfg.lr0, step, total_steps, cfg.lr_final_ratio)
                adam_step(params, grads, adam, lr)
                step += 1
                stats.step, stats.lr = step, lr
                record = {
                    "step": step, "epoch": epoch, "lr": lr,
                    "loss": stats.loss, "cls": stats.classification,
                    "loc": stats.localization, "fg": stats.n_foreground,
                }
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                if log_fn:
                    log_fn(record)
                if (
                    val_frames
                    and cfg.validation_every > 0
                    and step % cfg.validation_every == 0
                ):
                    ap = validation_ap(checkpoint, val_frames, val_config)
                    if log_file:
                        log_file.write(json.dumps({"step": step, "val_ap": ap}) + "\n")
                    if log_fn:
                        log_fn({"step": step, "val_ap": ap})
    finally:
        if log_file:
            log_file.close()
    return checkpoint


def validation_ap(
    checkpoint: Checkpoint,
    frames: list[Frame],
    eval_config: EvalConfig | None = None,
    inference: InferenceConfig | None = None,
    seed: int = 0,
) -> float:
    """Overall AP of the checkpoint on held-out frames (first model class)."""
    eval_config = eval_config or EvalConfig()
    inference = inference or InferenceConfig(num_centers=256)
    evals = []
    for i, frame in enumerate(frames):
        dets = detect(frame, checkpoint, inference, seed=seed + i)
        evals.append(frame_eval(frame, dets))
    return evaluate_class(evals, checkpoint.model.class_ids[0], eval_config).ap


def frame_eval(frame: Frame, detections: list[Detection]) -> FrameEval:
    """Bundle one frame's detections and labels for the metrics module."""
    return FrameEval(
        det_boxes=boxes_to_array([d.box for d in detections]),
        det_scores=np.array([d.score for d in detections]),
        det_classes=np.array([d.class_id for d in detections], dtype=int),
        gt_boxes=frame.label_boxes(),
        gt_classes=frame.label_classes(),
        gt_point_counts=frame.label_point_counts(),
    )


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

@dataclass
class DetectionResult:
    detections: list[Detection]
    centers: list[CenterProposal]


def detect(
    frame: Frame,
    checkpoint: Checkpoint,
    cfg: InferenceConfig,
    prev: tuple[list[Detection], "Pose2D"] | None = None,
    seed: int = 0,
    centers: list[CenterProposal] | None = None,
) -> list[Detection]:
    """Detect objects in one frame. See :func:`detect_verbose` for details."""
    return detect_verbose(frame, checkpoint, cfg, prev=prev, seed=seed,
                          centers=centers).detections


def detect_verbose(
    frame: Frame,
    checkpoint: Checkpoint,
    cfg: InferenceConfig,
    prev: tuple[list[Detection], "Pose2D"] | None = None,
    seed: int = 0,
    centers: list[CenterProposal] | None = None,
) -> DetectionResult:
    """Full single-frame inference.

    Centers are temporal seeds (pose-corrected top previous detections, when
    ``prev`` is given) topped up by the configured sampler, unless pinned via
    ``centers``. Each center's neighborhood is cropped with its own seeded
    stream, featurized in fixed-size chunks (possibly across workers), pushed
    through the head, decoded, score-filtered, and suppressed with oriented
    NMS per class.
    """
    model = checkpoint.model
    if len(frame.cloud) == 0:
        return DetectionResult([], [])
    if centers is None:
        seeds: list[CenterProposal] = []
        if prev is not None and cfg.temporal_seed_count > 0:
            prev_dets, pose_delta = prev
            seeds = temporal_seeds(
                [(d.box, d.score) for d in prev_dets],
                pose_delta,
                cfg.temporal_seed_count,
            )
        fill = cfg.num_centers - len(seeds)
        sampler_rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
        if fill > 0:
            centers = _sample_centers(
                frame, fill, cfg.sampler, cfg.z_range(), sampler_rng, seeds=seeds
            )
        else:
            centers = seeds
    if not centers:
        return DetectionResult([], [])

    crops = _crops_for_centers(
        frame, centers, cfg.crop_radius, cfg.points_per_crop, seed
    )
    cls_parts, reg_parts, suppressed_parts = [], [], []
    chunks = [
        crops[i:i + INFERENCE_CHUNK] for i in range(0, len(crops), INFERENCE_CHUNK)
    ]

    def run_chunk(chunk: list[LocalCrop]):
        cell, tape = featurize_batch(chunk, checkpoint.featurizer, mode="infer")
        cls, reg, _ = head_forward_batch(cell, checkpoint.head, tape.suppressed)
        return cls, reg, tape.suppressed

    if cfg.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run_chunk, chunks))
    else:
        results = [run_chunk(chunk) for chunk in chunks]
    for cls, reg, suppressed in results:
        cls_parts.append(cls)
        reg_parts.append(reg)
        suppressed_parts.append(suppressed)
    cls = np.concatenate(cls_parts, axis=0)
    reg = np.concatenate(reg_parts, axis=0)

    b = len(centers)
    n_cls = model.n_classes
    logits = cls.reshape(b, -1, n_cls + 1)  # (B, A, C+1)
    reg_flat = reg.reshape(b, -1, 7)
    shifted = logits - logits.max(axis=2, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=2, keepdims=True)
    fg_probs = probs[:, :, :n_cls]
    best_class = fg_probs.argmax(axis=2)
    best_prob = np.take_along_axis(fg_probs, best_class[:, :, None], axis=2)[:, :, 0]

    keep_b, keep_a = np.nonzero(best_prob >= cfg.score_threshold)
    if len(keep_b) == 0:
        return DetectionResult([], centers)
    centers_xy = np.array([[c.x, c.y] for c in centers], dtype=float)
    anchors = anchor_grid(centers_xy, model.anchor)  # (B, A, 7)
    decoded = decode_residual_array(
        reg_flat[keep_b, keep_a], anchors[keep_b, keep_a]
    )
    candidates = [
        Detection(
            box=Box3D.from_array(box_row),
            score=float(best_prob[bi, ai]),
            class_id=model.class_ids[int(best_class[bi, ai])],
        )
        for box_row, bi, ai in zip(decoded, keep_b, keep_a)
    ]
    kept = oriented_nms(candidates, cfg.nms_iou, cfg.nms_max_out)
    return DetectionResult(score_filter(kept, cfg.score_threshold), centers)


def detect_sequence(
    frames: list[Frame],
    checkpoint: Checkpoint,
    cfg: InferenceConfig,
    seed: int = 0,
) -> list[list[Detection]]:
    """Detect over an ordered sequence, seeding each frame with the previous
    frame's detections when ``temporal_seed_count`` is positive."""
    results: list[list[Detection]] = []
    prev: tuple[list[Detection], "Pose2D"] | None = None
    for i, frame in enumerate(frames):
        if prev is not None and cfg.temporal_seed_count > 0:
            dets = detect(frame, checkpoint, cfg, prev=prev, seed=seed + i)
        else:
            dets = detect(frame, checkpoint, cfg, seed=seed + i)
        results.append(dets)
        if i + 1 < len(frames):
            delta = frames[i + 1].pose.compose(frame.pose.inverse())
            prev = (dets, delta)
    return results


# ---------------------------------------------------------------------------
# FLOP estimates and sweeps
# ---------------------------------------------------------------------------

def flops_estimate(
    model: ModelConfig,
    cfg: InferenceConfig,
    eligible_points: int = 0,
    candidate_detections: int = 0,
) -> flops.FlopsBreakdown:
    """Analytic multiply-add breakdown for one frame at this configuration."""
    a = model.anchor
    return flops.estimate(
        point_dim=model.point_dim,
        block_widths=model.block_widths,
        n_offsets=a.n_offsets,
        n_anchor_types=a.n_anchor_types,
        n_classes=model.n_classes,
        proj_dim=a.proj_dim,
        num_centers=cfg.num_centers,
        points_per_crop=cfg.points_per_crop,
        eligible_points=eligible_points,
        candidate_detections=candidate_detections,
    )


@dataclass
class SweepRow:
    num_centers: int
    points_per_crop: int
    flops: int
    ap: float
    aph: float
    coverage: float


def sweep(
    checkpoint: Checkpoint,
    center_counts: list[int],
    point_counts: list[int],
    frames: list[Frame],
    base_cfg: InferenceConfig | None = None,
    eval_config: EvalConfig | None = None,
    seed: int = 0,
) -> list[SweepRow]:
    """Evaluate one checkpoint across the (centers x points) grid.

    The same trained weights serve every cell; only inference-time compute
    changes. Rows report the model-part FLOPs, detection AP/APH for the
    model's first class, and proposal coverage.
    """
    base_cfg = base_cfg or InferenceConfig()
    eval_config = eval_config or EvalConfig()
    model = checkpoint.model
    rows = []
    for n_points in point_counts:
        for n_centers in center_counts:
            cfg = InferenceConfig(
                num_centers=n_centers,
                points_per_crop=n_points,
                crop_radius=base_cfg.crop_radius,
                sampler=base_cfg.sampler,
                z_min=base_cfg.z_min,
                z_max=base_cfg.z_max,
                score_threshold=base_cfg.score_threshold,
                nms_iou=base_cfg.nms_iou,
                nms_max_out=base_cfg.nms_max_out,
                workers=base_cfg.workers,
            )
            evals, coverages = [], []
            for i, frame in enumerate(frames):
                result = detect_verbose(frame, checkpoint, cfg, seed=seed + i)
                evals.append(frame_eval(frame, result.detections))
                coverages.append(
                    _proposal_coverage(frame, result.centers, model, eval_config)
                )
            metric = evaluate_class(evals, model.class_ids[0], eval_config)
            rows.append(
                SweepRow(
                    num_centers=n_centers,
                    points_per_crop=n_points,
                    flops=flops_estimate(model, cfg).model,
                    ap=metric.ap,
                    aph=metric.aph,
                    coverage=float(np.mean([c for c in coverages if c is not None]))
                    if any(c is not None for c in coverages)
                    else 0.0,
                )
            )
    return rows


def _proposal_coverage(
    frame: Frame,
    centers: list[CenterProposal],
    model: ModelConfig,
    eval_config: EvalConfig,
) -> float | None:
    from .evaluation import coverage as coverage_fn

    gt_boxes, _ = _model_labels(frame, model.class_ids)
    counts = frame.label_point_counts()
    keep = [i for i, (box, cid) in enumerate(frame.labels) if cid in model.class_ids]
    counts = counts[keep] if len(keep) else np.zeros(0, dtype=int)
    if len(gt_boxes) == 0 or not (counts >= eval_config.min_points).any():
        return None
    if not centers:
        return 0.0
    centers_xy = np.array([[c.x, c.y] for c in centers], dtype=float)
    anchors = anchor_grid(centers_xy, model.anchor).reshape(-1, 7)
    return coverage_fn(
        gt_boxes, counts, anchors,
        min_points=eval_config.min_points,
        iou_threshold=eval_config.iou_threshold,
    )
