import math

import numpy as np
import pytest

from pointdet.geometry import Box3D, PointCloud, Pose2D
from pointdet.sampling import (
    CenterProposal,
    CenterSource,
    ZRange,
    farthest_point_centers,
    percentile_z_range,
    random_uniform_centers,
    temporal_seeds,
    z_filter,
)


def cloud_from_xy(xy, z=0.0):
    xy = np.asarray(xy, dtype=float)
    return PointCloud(np.column_stack([xy, np.full(len(xy), z)]))


class TestZFilter:
    def test_unbounded_range_keeps_all(self):
        cloud = PointCloud(np.random.default_rng(0).normal(size=(20, 3)))
        idx = z_filter(cloud, ZRange(-math.inf, math.inf))
        assert np.array_equal(idx, np.arange(20))

    def test_ground_exclusion_lower_bound(self):
        # a z in [-1.35, inf) band: lower bound inclusive, no upper bound
        cloud = PointCloud(np.array([[0, 0, -2.0], [0, 0, -1.35], [0, 0, 3.0]]))
        idx = z_filter(cloud, ZRange(-1.35, math.inf))
        assert idx.tolist() == [1, 2]

    def test_middle_band(self):
        cloud = PointCloud(np.array([[0, 0, -2.0], [0, 0, 0.0], [0, 0, 2.0]]))
        assert z_filter(cloud, ZRange(-1, 1)).tolist() == [1]

    def test_idempotent(self):
        cloud = PointCloud(np.random.default_rng(1).normal(size=(50, 3)))
        zr = ZRange(-0.5, 0.8)
        once = z_filter(cloud, zr)
        sub = PointCloud(cloud.xyz[once])
        twice = once[z_filter(sub, zr)]
        assert np.array_equal(once, twice)

    def test_degenerate_range_rejected(self):
        with pytest.raises(ValueError):
            ZRange(1.0, 1.0)


class TestPercentileZRange:
    def test_linear_interpolation(self):
        boxes = [Box3D(0, 0, z, 1, 1, 1, 0) for z in range(1, 101)]
        zr = percentile_z_range(boxes, 10, 90)
        assert zr.z_min == pytest.approx(10.9)
        assert zr.z_max == pytest.approx(90.1)

    def test_full_range_is_min_max(self):
        boxes = [Box3D(0, 0, z, 1, 1, 1, 0) for z in (3.0, -1.0, 7.5)]
        zr = percentile_z_range(boxes, 0, 100)
        assert zr.z_min == -1.0 and zr.z_max == 7.5

    def test_single_box_degenerates(self):
        with pytest.raises(ValueError):
            percentile_z_range([Box3D(0, 0, 1.0, 1, 1, 1, 0)], 10, 90)

    def test_empty_labels_rejected(self):
        with pytest.raises(ValueError):
            percentile_z_range([], 10, 90)


class TestRandomUniformCenters:
    def test_single_point(self):
        cloud = cloud_from_xy([[2.0, 3.0]])
        out = random_uniform_centers(cloud, np.array([0]), 1, np.random.default_rng(0))
        assert out[0].x == 2.0 and out[0].y == 3.0
        assert out[0].source is CenterSource.RANDOM

    def test_seed_determinism(self):
        cloud = cloud_from_xy(np.random.default_rng(2).uniform(-5, 5, (100, 2)))
        eligible = np.arange(100)
        a = random_uniform_centers(cloud, eligible, 10, np.random.default_rng(42))
        b = random_uniform_centers(cloud, eligible, 10, np.random.default_rng(42))
        assert a == b

    def test_empty_eligible_rejected(self):
        cloud = cloud_from_xy([[0, 0]])
        with pytest.raises(ValueError):
            random_uniform_centers(cloud, np.array([], dtype=int), 1,
                                   np.random.default_rng(0))

    def test_oversampling_switches_to_replacement(self):
        cloud = cloud_from_xy([[0, 0], [1, 1]])
        out = random_uniform_centers(cloud, np.arange(2), 5, np.random.default_rng(0))
        assert len(out) == 5

    def test_density_bias(self):
        # two clusters with 90 and 10 points: picks follow point mass ~9:1
        rng = np.random.default_rng(0)
        xy = np.vstack([
            np.tile([0.0, 0.0], (90, 1)),
            np.tile([100.0, 0.0], (10, 1)),
        ])
        cloud = cloud_from_xy(xy)
        eligible = np.arange(100)
        hits_left = 0
        trials = 10_000
        for _ in range(trials):
            pick = random_uniform_centers(cloud, eligible, 1, rng)[0]
            hits_left += pick.x == 0.0
        assert hits_left / trials == pytest.approx(0.9, abs=0.1 * 0.9)

    def test_proposals_coincide_with_points(self):
        rng = np.random.default_rng(9)
        xy = rng.uniform(-3, 3, (40, 2))
        cloud = cloud_from_xy(xy)
        out = random_uniform_centers(cloud, np.arange(40), 15, rng)
        as_set = {tuple(row) for row in xy}
        assert all((c.x, c.y) in as_set for c in out)


class TestFarthestPointCenters:
    def test_single_center(self):
        cloud = cloud_from_xy([[1.0, 2.0]])
        out = farthest_point_centers(cloud, np.array([0]), 1,
                                     rng=np.random.default_rng(0))
        assert out[0].x == 1.0 and out[0].source is CenterSource.FPS

    def test_collinear_argmax(self):
        # seeded at x=0, the farthest eligible point is x=10
        cloud = cloud_from_xy([[0.0, 0.0], [1.0, 0.0], [10.0, 0.0]])
        seed = CenterProposal(0.0, 0.0, CenterSource.FPS)
        out = farthest_point_centers(cloud, np.arange(3), 1, seeds=[seed])
        assert out[0].x == 10.0

    def test_forced_first_pick(self):
        cloud = cloud_from_xy([[0.0, 0.0], [1.0, 0.0], [10.0, 0.0]])
        out = farthest_point_centers(cloud, np.arange(3), 2, first_index=0)
        assert [c.x for c in out] == [0.0, 10.0]

    def test_deterministic_given_first_pick(self):
        rng = np.random.default_rng(4)
        cloud = cloud_from_xy(rng.uniform(-10, 10, (200, 2)))
        a = farthest_point_centers(cloud, np.arange(200), 20, first_index=7)
        b = farthest_point_centers(cloud, np.arange(200), 20, first_index=7)
        assert a == b

    def test_seeds_not_reemitted(self):
        cloud = cloud_from_xy([[0.0, 0.0], [5.0, 0.0]])
        seeds = [CenterProposal(0.0, 0.0, CenterSource.TEMPORAL_SEED)]
        out = farthest_point_centers(cloud, np.arange(2), 1, seeds=seeds)
        assert len(out) == 1 and out[0].x == 5.0

    def test_exhausted_eligible_pads_cyclically(self):
        cloud = cloud_from_xy([[0.0, 0.0], [1.0, 0.0]])
        out = farthest_point_centers(cloud, np.arange(2), 5, first_index=0)
        assert len(out) == 5
        assert [c.x for c in out] == [0.0, 1.0, 0.0, 1.0, 0.0]

    def test_min_distance_nonincreasing_in_n(self):
        rng = np.random.default_rng(8)
        cloud = cloud_from_xy(rng.uniform(-20, 20, (300, 2)))

        def min_pair_dist(centers):
            xy = np.array([[c.x, c.y] for c in centers])
            d = np.hypot(xy[:, None, 0] - xy[None, :, 0],
                         xy[:, None, 1] - xy[None, :, 1])
            np.fill_diagonal(d, np.inf)
            return d.min()

        values = [
            min_pair_dist(farthest_point_centers(cloud, np.arange(300), n,
                                                 first_index=0))
            for n in (5, 10, 20, 40)
        ]
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))

    def test_spreads_better_than_random(self):
        # min pairwise distance beats random sampling in >= 95% of trials
        rng = np.random.default_rng(10)
        xy = rng.uniform(-20, 20, (200, 2))
        cloud = cloud_from_xy(xy)
        eligible = np.arange(200)

        def min_pair(centers):
            pts = np.array([[c.x, c.y] for c in centers])
            d = np.hypot(pts[:, None, 0] - pts[None, :, 0],
                         pts[:, None, 1] - pts[None, :, 1])
            np.fill_diagonal(d, np.inf)
            return d.min()

        wins = 0
        for trial in range(100):
            fps = farthest_point_centers(cloud, eligible, 20,
                                         rng=np.random.default_rng(trial))
            rnd = random_uniform_centers(cloud, eligible, 20,
                                         np.random.default_rng(1000 + trial))
            wins += min_pair(fps) >= min_pair(rnd)
        assert wins >= 95


class TestTemporalSeeds:
    def test_zero_k(self):
        assert temporal_seeds([(Box3D(0, 0, 0, 1, 1, 1, 0), 0.9)],
                              Pose2D(0, 0, 0), 0) == []

    def test_identity_pose(self):
        dets = [(Box3D(5.0, 0.0, 0.5, 1, 1, 1, 0), 0.8)]
        out = temporal_seeds(dets, Pose2D(0, 0, 0), 1)
        assert out[0].x == 5.0 and out[0].y == 0.0
        assert out[0].source is CenterSource.TEMPORAL_SEED

    def test_top_k_by_score_in_score_order(self):
        dets = [
            (Box3D(1, 0, 0, 1, 1, 1, 0), 0.9),
            (Box3D(2, 0, 0, 1, 1, 1, 0), 0.1),
            (Box3D(3, 0, 0, 1, 1, 1, 0), 0.5),
        ]
        out = temporal_seeds(dets, Pose2D(0, 0, 0), 2)
        assert [c.x for c in out] == [1.0, 3.0]

    def test_pose_correction_applied(self):
        dets = [(Box3D(1.0, 0.0, 0.0, 1, 1, 1, 0), 1.0)]
        out = temporal_seeds(dets, Pose2D(0, 0, math.pi / 2), 1)
        assert out[0].x == pytest.approx(0.0, abs=1e-12)
        assert out[0].y == pytest.approx(1.0)

    def test_fewer_detections_than_k(self):
        dets = [(Box3D(1, 0, 0, 1, 1, 1, 0), 0.5)]
        assert len(temporal_seeds(dets, Pose2D(0, 0, 0), 10)) == 1
