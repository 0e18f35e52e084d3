"""Synthetic LiDAR-like scene generator for desk-scale training and
evaluation.

Scenes hold a noisy ground plane, labeled objects rendered as uniformly
sampled box shells (sides plus top), and unlabeled vertical clutter columns.
Clutter both exercises the samplers (points survive the ground z-filter
without being objects) and supplies hard negatives for the classifier.
Sequences move objects with bounded per-frame displacement under a drifting
vehicle pose, and every frame is expressed in vehicle coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .frame import Frame
from .geometry import Box3D, PointCloud, Pose2D, apply_pose_xy, wrap_angle
from .sampling import ZRange


@dataclass(frozen=True)
class ObjectClassConfig:
    name: str = "pedestrian"
    count_range: tuple[int, int] = (10, 30)
    length_range: tuple[float, float] = (0.85, 0.95)
    width_range: tuple[float, float] = (0.85, 0.95)
    height_range: tuple[float, float] = (1.6, 1.9)
    surface_points_range: tuple[int, int] = (60, 110)
    speed_range: tuple[float, float] = (0.0, 0.25)  # meters per frame
    intensity_range: tuple[float, float] = (0.6, 1.0)


@dataclass(frozen=True)
class SceneGenConfig:
    extent: float = 60.0
    ground_density: float = 1.5
    ground_noise: float = 0.02
    classes: tuple[ObjectClassConfig, ...] = (ObjectClassConfig(),)
    clutter_count_range: tuple[int, int] = (90, 140)
    clutter_points_range: tuple[int, int] = (40, 90)
    clutter_height_range: tuple[float, float] = (0.6, 2.2)
    clutter_radius: float = 0.18
    min_separation: float = 2.6
    feature_dim: int = 1
    ego_speed_range: tuple[float, float] = (0.0, 0.4)
    ego_yaw_rate_range: tuple[float, float] = (-0.02, 0.02)
    max_place_attempts: int = 200

    def __post_init__(self) -> None:
        if self.extent <= 0:
            raise ValueError("scene extent must be positive")
        if not self.classes:
            raise ValueError("need at least one object class")
        if self.feature_dim < 0:
            raise ValueError("feature_dim must be non-negative")

    def sampling_z_range(self) -> ZRange:
        """Default proposal z-filter: excludes the ground plane returns."""
        return ZRange(0.3, math.inf)


@dataclass
class _WorldObject:
    class_id: int
    xy: np.ndarray  # world position
    z_center: float
    dims: tuple[float, float, float]
    heading: float  # world heading
    n_points: int
    velocity: np.ndarray
    intensity: float


@dataclass
class _WorldClutter:
    xy: np.ndarray
    height: float
    n_points: int


@dataclass
class _WorldState:
    config: SceneGenConfig
    objects: list[_WorldObject]
    clutter: list[_WorldClutter]
    vehicle_xy: np.ndarray
    vehicle_yaw: float
    ego_velocity: np.ndarray
    ego_yaw_rate: float


def _place_centers(
    n: int,
    half: float,
    min_sep: float,
    existing: list[np.ndarray],
    rng: np.random.Generator,
    max_attempts: int,
) -> list[np.ndarray]:
    placed: list[np.ndarray] = []
    for _ in range(n):
        for attempt in range(max_attempts):
            xy = rng.uniform(-half, half, size=2)
            others = existing + placed
            if all(np.hypot(*(xy - o)) >= min_sep for o in others):
                placed.append(xy)
                break
        else:
            raise ValueError(
                f"could not place {n} items with separation {min_sep} "
                f"in extent {2 * half}; scene is too crowded"
            )
    return placed


def _build_world(cfg: SceneGenConfig, rng: np.random.Generator) -> _WorldState:
    half = cfg.extent / 2.0 - 1.5
    objects: list[_WorldObject] = []
    centers: list[np.ndarray] = []
    for class_id, klass in enumerate(cfg.classes):
        count = int(rng.integers(klass.count_range[0], klass.count_range[1] + 1))
        xys = _place_centers(count, half, cfg.min_separation, centers, rng,
                             cfg.max_place_attempts)
        centers.extend(xys)
        for xy in xys:
            dims = (
                float(rng.uniform(*klass.length_range)),
                float(rng.uniform(*klass.width_range)),
                float(rng.uniform(*klass.height_range)),
            )
            speed = rng.uniform(*klass.speed_range)
            direction = rng.uniform(-math.pi, math.pi)
            objects.append(
                _WorldObject(
                    class_id=class_id,
                    xy=np.asarray(xy, dtype=float),
                    z_center=dims[2] / 2.0,
                    dims=dims,
                    heading=float(rng.uniform(-math.pi, math.pi)),
                    n_points=int(rng.integers(klass.surface_points_range[0],
                                              klass.surface_points_range[1] + 1)),
                    velocity=speed * np.array([math.cos(direction), math.sin(direction)]),
                    intensity=float(rng.uniform(*klass.intensity_range)),
                )
            )
    n_clutter = int(rng.integers(cfg.clutter_count_range[0],
                                 cfg.clutter_count_range[1] + 1))
    clutter_xys = _place_centers(n_clutter, half, cfg.min_separation / 2.0,
                                 centers, rng, cfg.max_place_attempts)
    clutter = [
        _WorldClutter(
            xy=np.asarray(xy, dtype=float),
            height=float(rng.uniform(*cfg.clutter_height_range)),
            n_points=int(rng.integers(cfg.clutter_points_range[0],
                                      cfg.clutter_points_range[1] + 1)),
        )
        for xy in clutter_xys
    ]
    ego_speed = rng.uniform(*cfg.ego_speed_range)
    ego_dir = rng.uniform(-math.pi, math.pi)
    return _WorldState(
        config=cfg,
        objects=objects,
        clutter=clutter,
        vehicle_xy=np.zeros(2),
        vehicle_yaw=0.0,
        ego_velocity=ego_speed * np.array([math.cos(ego_dir), math.sin(ego_dir)]),
        ego_yaw_rate=float(rng.uniform(*cfg.ego_yaw_rate_range)),
    )


def _box_shell_points(dims: tuple[float, float, float], n: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Uniform samples over a box's four side faces and top, in the box frame
    with z measured from the ground.

    Faces are inset by a relative 1e-9 so every sample stays inside the
    labeled box under floating-point frame changes.
    """
    inset = 1.0 - 1e-9
    l, w, h = dims[0] * inset, dims[1] * inset, dims[2] * inset
    areas = np.array([w * h, w * h, l * h, l * h, l * w])
    faces = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.zeros((n, 3))
    for face, sel in [(i, faces == i) for i in range(5)]:
        k = int(sel.sum())
        if not k:
            continue
        if face < 2:  # +-length faces
            sign = 1.0 if face == 0 else -1.0
            pts[sel] = np.column_stack(
                [np.full(k, sign * l / 2.0), u[sel] * w, (v[sel] + 0.5) * h]
            )
        elif face < 4:  # +-width faces
            sign = 1.0 if face == 2 else -1.0
            pts[sel] = np.column_stack(
                [u[sel] * l, np.full(k, sign * w / 2.0), (v[sel] + 0.5) * h]
            )
        else:  # top face
            pts[sel] = np.column_stack(
                [u[sel] * l, v[sel] * w, np.full(k, h)]
            )
    return pts


def _render_frame(world: _WorldState, timestamp: float,
                  rng: np.random.Generator) -> Frame:
    cfg = world.config
    vehicle_to_world = Pose2D(
        float(world.vehicle_xy[0]), float(world.vehicle_xy[1]), world.vehicle_yaw
    )
    pose = vehicle_to_world.inverse()

    xyz_parts: list[np.ndarray] = []
    intensity_parts: list[np.ndarray] = []
    labels: list[tuple[Box3D, int]] = []

    half = cfg.extent / 2.0
    n_ground = int(cfg.ground_density * cfg.extent * cfg.extent)
    ground = np.column_stack(
        [
            rng.uniform(-half, half, size=n_ground),
            rng.uniform(-half, half, size=n_ground),
            rng.normal(0.0, cfg.ground_noise, size=n_ground),
        ]
    )
    xyz_parts.append(ground)
    intensity_parts.append(rng.uniform(0.05, 0.35, size=n_ground))

    for obj in world.objects:
        local = _box_shell_points(obj.dims, obj.n_points, rng)
        c, s = math.cos(obj.heading), math.sin(obj.heading)
        world_xy = local[:, :2] @ np.array([[c, s], [-s, c]]) + obj.xy
        world_pts = np.column_stack([world_xy, local[:, 2]])
        veh_xy = apply_pose_xy(pose, world_pts[:, :2])
        xyz_parts.append(np.column_stack([veh_xy, world_pts[:, 2]]))
        intensity_parts.append(
            np.clip(rng.normal(obj.intensity, 0.05, size=obj.n_points), 0.0, 1.0)
        )
        center_veh = apply_pose_xy(pose, obj.xy)
        labels.append(
            (
                Box3D(
                    cx=float(center_veh[0]),
                    cy=float(center_veh[1]),
                    cz=obj.z_center,
                    length=obj.dims[0],
                    width=obj.dims[1],
                    height=obj.dims[2],
                    heading=wrap_angle(obj.heading + pose.yaw),
                ),
                obj.class_id,
            )
        )

    for col in world.clutter:
        angle = rng.uniform(-math.pi, math.pi, size=col.n_points)
        radius = cfg.clutter_radius * np.sqrt(rng.uniform(0, 1, size=col.n_points))
        world_xy = col.xy + np.column_stack(
            [radius * np.cos(angle), radius * np.sin(angle)]
        )
        z = rng.uniform(0.0, col.height, size=col.n_points)
        veh_xy = apply_pose_xy(pose, world_xy)
        xyz_parts.append(np.column_stack([veh_xy, z]))
        intensity_parts.append(rng.uniform(0.25, 0.7, size=col.n_points))

    xyz = np.concatenate(xyz_parts, axis=0)
    if cfg.feature_dim > 0:
        feats = np.zeros((len(xyz), cfg.feature_dim))
        feats[:, 0] = np.concatenate(intensity_parts)
        if cfg.feature_dim > 1:
            feats[:, 1:] = rng.uniform(0, 1, size=(len(xyz), cfg.feature_dim - 1))
    else:
        feats = np.zeros((len(xyz), 0))
    return Frame(cloud=PointCloud(xyz, feats), labels=labels, pose=pose,
                 timestamp=timestamp)


def _advance_world(world: _WorldState) -> None:
    half = world.config.extent / 2.0 - 1.5
    for obj in world.objects:
        obj.xy = obj.xy + obj.velocity
        for axis in range(2):  # reflect at scene borders
            if abs(obj.xy[axis]) > half:
                obj.xy[axis] = np.clip(obj.xy[axis], -half, half)
                obj.velocity[axis] *= -1.0
    world.vehicle_xy = world.vehicle_xy + world.ego_velocity
    world.vehicle_yaw = wrap_angle(world.vehicle_yaw + world.ego_yaw_rate)


def generate_scene(cfg: SceneGenConfig, rng: np.random.Generator) -> Frame:
    """One static frame; labels are exactly the generating boxes."""
    world = _build_world(cfg, rng)
    return _render_frame(world, timestamp=0.0, rng=rng)


def generate_sequence(
    cfg: SceneGenConfig, n_frames: int, rng: np.random.Generator,
    dt: float = 0.1,
) -> list[Frame]:
    """Frames of a moving scene; objects persist with bounded displacement."""
    if n_frames < 2:
        raise ValueError("a sequence needs at least two frames")
    world = _build_world(cfg, rng)
    frames = []
    for t in range(n_frames):
        frames.append(_render_frame(world, timestamp=t * dt, rng=rng))
        if t + 1 < n_frames:
            _advance_world(world)
    return frames
