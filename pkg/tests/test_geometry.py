import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pointdet.geometry import (
    Box3D,
    Point,
    PointCloud,
    Pose2D,
    apply_pose,
    apply_pose_box,
    bev_iou,
    bev_iou_matrix,
    boxes_to_array,
    iou_3d,
    points_in_box,
    wrap_angle,
)

from oracles import monte_carlo_bev_iou, point_in_rotated_rect


def random_box(rng, span=4.0):
    return Box3D(
        cx=rng.uniform(-span, span),
        cy=rng.uniform(-span, span),
        cz=rng.uniform(-1, 1),
        length=rng.uniform(0.5, 3.0),
        width=rng.uniform(0.5, 3.0),
        height=rng.uniform(0.5, 2.5),
        heading=rng.uniform(-math.pi, math.pi),
    )


class TestWrapAngle:
    def test_identity(self):
        assert wrap_angle(0.0) == 0.0

    def test_subtract_period(self):
        assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)

    def test_boundary_maps_to_top(self):
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(math.pi) == pytest.approx(math.pi)

    def test_non_finite_rejected(self):
        for bad in (math.nan, math.inf, -math.inf):
            with pytest.raises(ValueError):
                wrap_angle(bad)

    @given(st.floats(-1e6, 1e6))
    def test_idempotent_and_in_range(self, theta):
        once = wrap_angle(theta)
        assert -math.pi < once <= math.pi
        assert wrap_angle(once) == pytest.approx(once, abs=1e-12)

    @given(st.floats(-100.0, 100.0))
    def test_congruent_mod_two_pi(self, theta):
        once = wrap_angle(theta)
        k = (theta - once) / (2 * math.pi)
        assert k == pytest.approx(round(k), abs=1e-9)


class TestBevIou:
    def test_identical(self):
        b = Box3D(1, 2, 0, 2, 1, 1, 0.3)
        assert bev_iou(b, b) == pytest.approx(1.0, abs=1e-9)

    def test_disjoint(self):
        a = Box3D(0, 0, 0, 1, 1, 1, 0)
        b = Box3D(10, 0, 0, 1, 1, 1, 0)
        assert bev_iou(a, b) == 0.0

    def test_third_overlap(self):
        a = Box3D(0, 0, 0, 1, 1, 1, 0)
        b = Box3D(0.5, 0, 0, 1, 1, 1, 0)
        assert bev_iou(a, b) == pytest.approx(1 / 3, abs=1e-9)

    def test_rotated_square_against_monte_carlo(self):
        a = Box3D(0, 0, 0, 1, 1, 1, 0)
        b = Box3D(0, 0, 0, 1, 1, 1, math.pi / 4)
        mc = monte_carlo_bev_iou(a, b, n_samples=1_000_000, seed=1)
        assert bev_iou(a, b) == pytest.approx(mc, abs=1e-2)
        # exact value for a unit square against its 45-degree rotation
        exact = 2 * (math.sqrt(2) - 1) / (2 - 2 * (math.sqrt(2) - 1))
        assert bev_iou(a, b) == pytest.approx(exact, abs=1e-9)

    def test_edge_touching_boxes_have_zero_iou(self):
        a = Box3D(0, 0, 0, 1, 1, 1, 0)
        b = Box3D(1.0, 0, 0, 1, 1, 1, 0)
        assert bev_iou(a, b) == 0.0

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a, b = random_box(rng), random_box(rng)
            ab, ba = bev_iou(a, b), bev_iou(b, a)
            assert ab == pytest.approx(ba, abs=1e-12)
            assert 0.0 <= ab <= 1.0 + 1e-12

    def test_pose_invariance(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a, b = random_box(rng), random_box(rng)
            pose = Pose2D(rng.uniform(-5, 5), rng.uniform(-5, 5),
                          rng.uniform(-math.pi, math.pi))
            before = bev_iou(a, b)
            after = bev_iou(apply_pose_box(pose, a), apply_pose_box(pose, b))
            assert after == pytest.approx(before, abs=1e-9)

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, 0.0, 1, 1, 0)

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(13)
        boxes_a = [random_box(rng) for _ in range(12)]
        boxes_b = [random_box(rng) for _ in range(9)]
        matrix = bev_iou_matrix(boxes_to_array(boxes_a), boxes_to_array(boxes_b))
        for i, a in enumerate(boxes_a):
            for j, b in enumerate(boxes_b):
                assert matrix[i, j] == pytest.approx(bev_iou(a, b), abs=1e-12)


class TestIou3D:
    def test_identical(self):
        b = Box3D(0, 0, 1, 2, 1, 1.5, 0.2)
        assert iou_3d(b, b) == pytest.approx(1.0, abs=1e-9)

    def test_disjoint_z(self):
        a = Box3D(0, 0, 0, 1, 1, 1, 0)
        b = Box3D(0, 0, 5, 1, 1, 1, 0)
        assert iou_3d(a, b) == 0.0

    def test_half_z_overlap(self):
        a = Box3D(0, 0, 0, 1, 1, 1, 0)
        b = Box3D(0, 0, 0.5, 1, 1, 1, 0)
        assert iou_3d(a, b) == pytest.approx(1 / 3, abs=1e-9)


class TestPointsInBox:
    def test_empty_cloud(self):
        assert points_in_box(PointCloud(np.zeros((0, 3))), Box3D(0, 0, 0, 1, 1, 1, 0)) == 0

    def test_center_point(self):
        cloud = PointCloud(np.array([[0.0, 0.0, 0.0]]))
        assert points_in_box(cloud, Box3D(0, 0, 0, 1, 1, 1, 0)) == 1

    def test_boundary_inclusive(self):
        cloud = PointCloud(np.array([[0.5, 0.0, 0.0]]))
        assert points_in_box(cloud, Box3D(0, 0, 0, 1, 1, 1, 0)) == 1

    def test_against_per_point_oracle(self):
        rng = np.random.default_rng(3)
        xyz = rng.uniform(-1.2, 1.2, size=(100, 3))
        cloud = PointCloud(xyz)
        box = Box3D(0.1, -0.2, 0.0, 1.3, 0.8, 1.1, 0.7)
        expected = sum(
            point_in_rotated_rect(x, y, box.cx, box.cy, box.length, box.width,
                                  box.heading)
            and abs(z - box.cz) <= box.height / 2
            for x, y, z in xyz
        )
        assert points_in_box(cloud, box) == expected

    def test_invariant_under_joint_rigid_transform(self):
        rng = np.random.default_rng(5)
        xyz = rng.uniform(-2, 2, size=(60, 3))
        box = Box3D(0.2, 0.1, 0.0, 1.5, 1.0, 2.0, 0.4)
        pose = Pose2D(1.7, -2.3, 0.9)
        moved_xy = apply_pose(pose, xyz[:, :2])
        moved = np.column_stack([moved_xy, xyz[:, 2]])
        assert points_in_box(PointCloud(xyz), box) == points_in_box(
            PointCloud(moved), apply_pose_box(pose, box)
        )


class TestPose:
    def test_identity(self):
        pose = Pose2D(0, 0, 0)
        assert np.allclose(apply_pose(pose, np.array([1.5, -2.0])), [1.5, -2.0])

    def test_translation(self):
        assert np.allclose(apply_pose(Pose2D(1, 0, 0), np.array([0.0, 0.0])), [1, 0])

    def test_rotation(self):
        out = apply_pose(Pose2D(0, 0, math.pi / 2), np.array([1.0, 0.0]))
        assert np.allclose(out, [0, 1], atol=1e-12)

    def test_box_heading_shift_and_wrap(self):
        box = Box3D(1, 0, 0.5, 2, 1, 1, math.pi - 0.1)
        out = apply_pose_box(Pose2D(0, 0, 0.3), box)
        assert out.heading == pytest.approx(wrap_angle(math.pi + 0.2))
        assert out.cz == box.cz

    def test_compose_inverse(self):
        pose = Pose2D(1.2, -0.7, 0.6)
        identity = pose.compose(pose.inverse())
        assert identity.tx == pytest.approx(0, abs=1e-12)
        assert identity.ty == pytest.approx(0, abs=1e-12)
        assert identity.yaw == pytest.approx(0, abs=1e-12)


class TestAcceptanceScale:
    def test_iou_against_monte_carlo_on_random_pairs(self):
        # smaller twin of the acceptance criterion for fast feedback
        rng = np.random.default_rng(17)
        for k in range(20):
            a, b = random_box(rng, span=1.5), random_box(rng, span=1.5)
            mc = monte_carlo_bev_iou(a, b, n_samples=200_000, seed=k)
            assert bev_iou(a, b) == pytest.approx(mc, abs=2e-2)


class TestTypes:
    def test_point_requires_finite(self):
        with pytest.raises(ValueError):
            Point(math.nan, 0, 0)

    def test_cloud_feature_dim_consistency(self):
        cloud = PointCloud(np.zeros((2, 3)), np.ones((2, 2)))
        assert cloud.feature_dim == 2
        with pytest.raises(ValueError):
            PointCloud(np.zeros((2, 3)), np.ones((3, 2)))

    def test_cloud_from_points_mixed_features_rejected(self):
        with pytest.raises(ValueError):
            PointCloud.from_points([Point(0, 0, 0, (1.0,)), Point(1, 1, 1)])

    def test_box_heading_wrapped_on_creation(self):
        box = Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi)
        assert box.heading == pytest.approx(math.pi)
