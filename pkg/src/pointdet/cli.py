"""Command-line surface: scene generation, training, detection, evaluation,
coverage curves, adaptive-compute sweeps, and FLOP estimates.

Every run with a fixed ``--seed`` writes bit-identical CSV output. Commands
exit 0 on success and nonzero with a one-line diagnostic otherwise.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys

import numpy as np

from .config import ConfigError, RunConfig, dump_run_config, load_run_config
from .evaluation import coverage as coverage_metric, range_bucketed_eval
from .frame import Frame
from .frameio import FormatError, load_checkpoint, read_frames, save_checkpoint, write_frames
from .geometry import Box3D
from .heads import anchor_grid
from .pipeline import (
    InferenceConfig,
    detect_sequence,
    detect_verbose,
    flops_estimate,
    frame_eval,
    sweep,
    train,
)
from .postprocess import Detection
from .sampling import farthest_point_centers, random_uniform_centers, z_filter
from .scenes import generate_scene, generate_sequence

METRIC_COLUMNS = [
    "experiment", "class", "bucket", "num_centers", "points_per_crop",
    "flops", "AP", "APH", "coverage",
]
DETECTION_COLUMNS = [
    "frame_id", "class", "score", "cx", "cy", "cz",
    "length", "width", "height", "heading",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".6g")
    return str(value)


def _write_csv(path: str, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in columns})


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config)
    return RunConfig()


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints: {text!r}")


def _inference_config(cfg: RunConfig, args) -> InferenceConfig:
    overrides = {}
    for flag, field in [
        ("num_centers", "num_centers"),
        ("points_per_crop", "points_per_crop"),
        ("sampler", "sampler"),
        ("temporal_seeds", "temporal_seed_count"),
        ("score_threshold", "score_threshold"),
        ("workers", "workers"),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    return dataclasses.replace(cfg.inference, **overrides)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_gen(args) -> int:
    if args.dump_config:
        print(dump_run_config())
        return 0
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed
    frames: list[Frame] = []
    for i in range(args.frames):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 23, i]))
        if args.sequence > 1:
            frames.extend(generate_sequence(cfg.scene, args.sequence, rng))
        else:
            frames.append(generate_scene(cfg.scene, rng))
    write_frames(frames, args.out)
    label = "sequences" if args.sequence > 1 else "frames"
    print(f"wrote {len(frames)} frames ({args.frames} {label}) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed
    frames = read_frames(args.frames)
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    val_frames = read_frames(args.val_frames) if args.val_frames else None
    model = dataclasses.replace(
        cfg.model, point_feature_dim=frames[0].cloud.feature_dim
    )
    checkpoint = train(
        frames, train_cfg, model,
        val_frames=val_frames, val_config=cfg.eval, log_path=args.log,
    )
    save_checkpoint(checkpoint, args.out)
    print(f"wrote checkpoint to {args.out}")
    return 0


def _detections_rows(frame_id: int, dets: list[Detection]) -> list[dict]:
    rows = []
    for d in dets:
        b = d.box
        rows.append({
            "frame_id": frame_id, "class": d.class_id, "score": d.score,
            "cx": b.cx, "cy": b.cy, "cz": b.cz, "length": b.length,
            "width": b.width, "height": b.height, "heading": b.heading,
        })
    return rows


def _cmd_detect(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed
    checkpoint = load_checkpoint(args.checkpoint)
    frames = read_frames(args.frames)
    inf_cfg = _inference_config(cfg, args)
    rows: list[dict] = []
    if inf_cfg.temporal_seed_count > 0:
        per_frame = detect_sequence(frames, checkpoint, inf_cfg, seed=seed)
        for i, dets in enumerate(per_frame):
            rows.extend(_detections_rows(i, dets))
    else:
        for i, frame in enumerate(frames):
            result = detect_verbose(frame, checkpoint, inf_cfg, seed=seed + i)
            rows.extend(_detections_rows(i, result.detections))
    _write_csv(args.out, DETECTION_COLUMNS, rows)
    print(f"wrote {len(rows)} detections to {args.out}")
    return 0


def _read_detections_csv(path: str, n_frames: int) -> list[list[Detection]]:
    per_frame: list[list[Detection]] = [[] for _ in range(n_frames)]
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            idx = int(row["frame_id"])
            if idx >= n_frames:
                raise ValueError(
                    f"{path}: frame_id {idx} out of range for {n_frames} frames"
                )
            per_frame[idx].append(
                Detection(
                    box=Box3D(
                        cx=float(row["cx"]), cy=float(row["cy"]),
                        cz=float(row["cz"]), length=float(row["length"]),
                        width=float(row["width"]), height=float(row["height"]),
                        heading=float(row["heading"]),
                    ),
                    score=float(row["score"]),
                    class_id=int(row["class"]),
                )
            )
    return per_frame


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    frames = read_frames(args.frames)
    detections = _read_detections_csv(args.detections, len(frames))
    evals = [frame_eval(f, d) for f, d in zip(frames, detections)]
    rows = []
    for metric in range_bucketed_eval(evals, cfg.eval):
        rows.append({
            "experiment": "eval", "class": metric.class_id,
            "bucket": metric.bucket, "AP": metric.ap, "APH": metric.aph,
        })
    _write_csv(args.out, METRIC_COLUMNS, rows)
    print(f"wrote {len(rows)} metric rows to {args.out}")
    return 0


def _cmd_coverage(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed
    frames = read_frames(args.frames)
    sampler = args.sampler or cfg.inference.sampler
    zrange = cfg.inference.z_range()
    rows = []
    for n in args.num_centers:
        values = []
        for i, frame in enumerate(frames):
            gt = frame.label_boxes()
            counts = frame.label_point_counts()
            if len(gt) == 0 or not (counts >= cfg.eval.min_points).any():
                continue
            eligible = z_filter(frame.cloud, zrange)
            if len(eligible) == 0:
                values.append(0.0)
                continue
            rng = np.random.default_rng(np.random.SeedSequence([seed, 31, i]))
            if sampler == "fps":
                centers = farthest_point_centers(frame.cloud, eligible, n, rng=rng)
            else:
                centers = random_uniform_centers(frame.cloud, eligible, n, rng)
            xy = np.array([[c.x, c.y] for c in centers])
            anchors = anchor_grid(xy, cfg.model.anchor).reshape(-1, 7)
            values.append(
                coverage_metric(gt, counts, anchors,
                                min_points=cfg.eval.min_points,
                                iou_threshold=cfg.eval.iou_threshold)
            )
        rows.append({
            "experiment": f"coverage-{sampler}", "class": cfg.model.class_ids[0],
            "bucket": "overall", "num_centers": n,
            "coverage": float(np.mean(values)) if values else 0.0,
        })
    _write_csv(args.out, METRIC_COLUMNS, rows)
    print(f"wrote {len(rows)} coverage rows to {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed
    checkpoint = load_checkpoint(args.checkpoint)
    frames = read_frames(args.frames)
    base = _inference_config(cfg, args)
    rows = []
    for r in sweep(checkpoint, args.centers, args.points, frames,
                   base_cfg=base, eval_config=cfg.eval, seed=seed):
        rows.append({
            "experiment": "sweep", "class": checkpoint.model.class_ids[0],
            "bucket": "overall", "num_centers": r.num_centers,
            "points_per_crop": r.points_per_crop, "flops": r.flops,
            "AP": r.ap, "APH": r.aph, "coverage": r.coverage,
        })
    _write_csv(args.out, METRIC_COLUMNS, rows)
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def _cmd_flops(args) -> int:
    cfg = _load_config(args)
    inf_cfg = _inference_config(cfg, args)
    breakdown = flops_estimate(cfg.model, inf_cfg)
    print(f"featurizer_macs={breakdown.featurizer}")
    print(f"head_macs={breakdown.head}")
    print(f"model_macs={breakdown.model}")
    print(f"sampling_macs={breakdown.sampling}")
    print(f"nms_macs={breakdown.nms}")
    print(f"total_macs={breakdown.total}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointdet",
        description="Point-cloud object detection with sampled proposals.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, frames=True, out=True):
        p.add_argument("--config", help="run-config JSON file")
        p.add_argument("--seed", type=int, default=None)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if frames:
            p.add_argument("--frames", required=True, help="frame file")
        if out:
            p.add_argument("--out", required=True, help="output path")

    p = sub.add_parser("gen", help="generate synthetic frames")
    p.add_argument("--config", help="run-config JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output frame file")
    p.add_argument("--frames", type=int, default=1,
                   help="number of frames (or sequences with --sequence)")
    p.add_argument("--sequence", type=int, default=1,
                   help="frames per sequence (1 = independent frames)")
    p.add_argument("--dump-config", action="store_true",
                   help="print the fully populated default config and exit")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a detector")
    common(p)
    p.add_argument("--val-frames", help="held-out frame file for validation AP")
    p.add_argument("--log", help="JSONL training log path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("detect", help="run detection, write CSV")
    common(p, checkpoint=True)
    p.add_argument("--num-centers", type=int, default=None)
    p.add_argument("--points-per-crop", type=int, default=None)
    p.add_argument("--sampler", choices=["fps", "random"], default=None)
    p.add_argument("--temporal-seeds", type=int, default=None,
                   help="seed this many centers from previous-frame detections")
    p.add_argument("--score-threshold", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("eval", help="score a detection CSV against labels")
    common(p)
    p.add_argument("--detections", required=True, help="detection CSV")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("coverage", help="proposal coverage curves")
    common(p)
    p.add_argument("--sampler", choices=["fps", "random"], default=None)
    p.add_argument("--num-centers", type=_int_list, default=[64, 128, 256, 512],
                   help="comma-separated proposal counts")
    p.set_defaults(func=_cmd_coverage)

    p = sub.add_parser("sweep", help="adaptive-compute sweep of one checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--centers", type=_int_list, default=[64, 128, 256, 512, 1024])
    p.add_argument("--points", type=_int_list, default=[64])
    p.add_argument("--sampler", choices=["fps", "random"], default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("flops", help="print the analytic multiply-add counts")
    p.add_argument("--config", help="run-config JSON file")
    p.add_argument("--num-centers", type=int, default=None)
    p.add_argument("--points-per-crop", type=int, default=None)
    p.set_defaults(func=_cmd_flops)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen" and not args.dump_config and not args.out:
        parser.error("gen requires --out (or --dump-config)")
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
