"""Scikit-learn style estimator wrapping training and detection.

``fit`` trains on a list of labeled frames, ``predict`` returns per-frame
detection lists, and ``score`` reports overall average precision, so the
detector composes with sklearn tooling (``clone``, ``get_params``, search
utilities) despite its non-tabular inputs.
"""

from __future__ import annotations

import math

from sklearn.base import BaseEstimator

from .evaluation import EvalConfig, evaluate_class
from .heads import AnchorConfig
from .pipeline import (
    InferenceConfig,
    ModelConfig,
    TrainConfig,
    detect,
    frame_eval,
    train,
)
from .validation import check_feature_dim, check_frames


class PointCloudDetector(BaseEstimator):
    """Single-class point-cloud object detector with sampled proposals.

    Parameters mirror the pipeline configuration dataclasses; see the README
    configuration reference for semantics and defaults. The fitted model is
    stored on ``checkpoint_``.
    """

    def __init__(
        self,
        *,
        # architecture
        block_widths=(64, 64, 64, 96, 96),
        grid_size=11,
        grid_extent=1.0,
        rotations=(0.0, math.pi / 4),
        dim_priors=((0.9, 0.9, 1.75),),
        z_priors=(0.875,),
        proj_dim=32,
        class_ids=(0,),
        # training
        lr0=1e-3,
        lr_final_ratio=0.1,
        epochs=6,
        frames_per_step=1,
        centers_per_frame=96,
        heading_mode="sine",
        focal_alpha=0.5,
        focal_gamma=2.0,
        smooth_l1_delta=1.0,
        cls_weight=1.0,
        loc_weight=2.0,
        fg_threshold=0.6,
        bg_threshold=0.45,
        compute_dtype="float32",
        # cropping / sampling (shared by train and inference)
        points_per_crop=64,
        crop_radius=2.0,
        sampler="fps",
        z_min=0.3,
        z_max=math.inf,
        # inference
        num_centers=1024,
        temporal_seed_count=0,
        score_threshold=0.3,
        nms_iou=0.5,
        nms_max_out=512,
        workers=1,
        # evaluation / reproducibility
        eval_iou=0.5,
        min_points=5,
        random_state=0,
    ):
        self.block_widths = block_widths
        self.grid_size = grid_size
        self.grid_extent = grid_extent
        self.rotations = rotations
        self.dim_priors = dim_priors
        self.z_priors = z_priors
        self.proj_dim = proj_dim
        self.class_ids = class_ids
        self.lr0 = lr0
        self.lr_final_ratio = lr_final_ratio
        self.epochs = epochs
        self.frames_per_step = frames_per_step
        self.centers_per_frame = centers_per_frame
        self.heading_mode = heading_mode
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma
        self.smooth_l1_delta = smooth_l1_delta
        self.cls_weight = cls_weight
        self.loc_weight = loc_weight
        self.fg_threshold = fg_threshold
        self.bg_threshold = bg_threshold
        self.compute_dtype = compute_dtype
        self.points_per_crop = points_per_crop
        self.crop_radius = crop_radius
        self.sampler = sampler
        self.z_min = z_min
        self.z_max = z_max
        self.num_centers = num_centers
        self.temporal_seed_count = temporal_seed_count
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.nms_max_out = nms_max_out
        self.workers = workers
        self.eval_iou = eval_iou
        self.min_points = min_points
        self.random_state = random_state

    # -- config assembly ---------------------------------------------------

    def _anchor_config(self) -> AnchorConfig:
        return AnchorConfig(
            grid_size=self.grid_size,
            grid_extent=self.grid_extent,
            rotations=tuple(self.rotations),
            dim_priors=tuple(tuple(p) for p in self.dim_priors),
            z_priors=tuple(self.z_priors),
            proj_dim=self.proj_dim,
        )

    def _model_config(self, feature_dim: int) -> ModelConfig:
        return ModelConfig(
            block_widths=tuple(self.block_widths),
            point_feature_dim=feature_dim,
            anchor=self._anchor_config(),
            class_ids=tuple(self.class_ids),
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0,
            lr_final_ratio=self.lr_final_ratio,
            epochs=self.epochs,
            frames_per_step=self.frames_per_step,
            centers_per_frame=self.centers_per_frame,
            points_per_crop=self.points_per_crop,
            crop_radius=self.crop_radius,
            sampler=self.sampler,
            z_min=self.z_min,
            z_max=self.z_max,
            heading_mode=self.heading_mode,
            focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma,
            smooth_l1_delta=self.smooth_l1_delta,
            cls_weight=self.cls_weight,
            loc_weight=self.loc_weight,
            fg_threshold=self.fg_threshold,
            bg_threshold=self.bg_threshold,
            seed=self.random_state,
            compute_dtype=self.compute_dtype,
        )

    def inference_config(self, **overrides) -> InferenceConfig:
        """The estimator's inference configuration, optionally overridden."""
        base = dict(
            num_centers=self.num_centers,
            points_per_crop=self.points_per_crop,
            crop_radius=self.crop_radius,
            sampler=self.sampler,
            temporal_seed_count=self.temporal_seed_count,
            z_min=self.z_min,
            z_max=self.z_max,
            score_threshold=self.score_threshold,
            nms_iou=self.nms_iou,
            nms_max_out=self.nms_max_out,
            workers=self.workers,
        )
        base.update(overrides)
        return InferenceConfig(**base)

    # -- estimator API -----------------------------------------------------

    def fit(self, X, y=None):
        """Train on labeled frames. ``y`` is ignored; labels ride on frames."""
        frames = check_frames(X)
        model = self._model_config(frames[0].cloud.feature_dim)
        check_feature_dim(frames, model.point_feature_dim)
        self.checkpoint_ = train(frames, self._train_config(), model)
        return self

    def predict(self, X):
        """Detections per frame, as a list of :class:`Detection` lists."""
        self._check_fitted()
        frames = check_frames(X)
        check_feature_dim(frames, self.checkpoint_.model.point_feature_dim)
        cfg = self.inference_config()
        return [
            detect(frame, self.checkpoint_, cfg, seed=self.random_state + i)
            for i, frame in enumerate(frames)
        ]

    def score(self, X, y=None) -> float:
        """Average precision at ``eval_iou`` over the given frames."""
        frames = check_frames(X)
        detections = self.predict(frames)
        evals = [frame_eval(f, d) for f, d in zip(frames, detections)]
        cfg = EvalConfig(iou_threshold=self.eval_iou, min_points=self.min_points)
        return evaluate_class(evals, self.checkpoint_.model.class_ids[0], cfg).ap

    def _check_fitted(self) -> None:
        if not hasattr(self, "checkpoint_"):
            raise RuntimeError(
                "this PointCloudDetector is not fitted; call fit() or load()"
            )

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        from .frameio import save_checkpoint

        self._check_fitted()
        save_checkpoint(self.checkpoint_, path)

    @classmethod
    def load(cls, path, **params) -> "PointCloudDetector":
        """Detector wrapping a stored checkpoint; params override inference."""
        from .frameio import load_checkpoint

        checkpoint = load_checkpoint(path)
        model = checkpoint.model
        est = cls(
            block_widths=model.block_widths,
            grid_size=model.anchor.grid_size,
            grid_extent=model.anchor.grid_extent,
            rotations=model.anchor.rotations,
            dim_priors=model.anchor.dim_priors,
            z_priors=model.anchor.z_priors,
            proj_dim=model.anchor.proj_dim,
            class_ids=model.class_ids,
        )
        est.set_params(**params)
        est.checkpoint_ = checkpoint
        return est
