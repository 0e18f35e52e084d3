"""Oriented-box and angle math: wrapping, rotated IoU, containment, rigid 2D poses.

Boxes live in vehicle coordinates with ``length`` along the heading direction
and ``width`` perpendicular to it. Rotated-rectangle intersection is computed
exactly with Sutherland-Hodgman convex clipping and the shoelace formula.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

# Intersection areas below this are treated as empty (boxes touching along an
# edge or corner have IoU 0).
_AREA_EPS = 1e-12


def wrap_angle(theta: float) -> float:
    """Normalize an angle in radians into the half-open interval (-pi, pi].

    Raises:
        ValueError: if ``theta`` is NaN or infinite.
    """
    if not math.isfinite(theta):
        raise ValueError(f"cannot wrap non-finite angle {theta!r}")
    wrapped = math.fmod(theta, TWO_PI)
    if wrapped > math.pi:
        wrapped -= TWO_PI
    elif wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


def wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_angle`; input must be finite."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("cannot wrap non-finite angles")
    wrapped = np.mod(theta, TWO_PI)          # [0, 2pi)
    wrapped = np.where(wrapped > math.pi, wrapped - TWO_PI, wrapped)
    # values already in range pass through exactly (mod would perturb them)
    in_range = (theta > -math.pi) & (theta <= math.pi)
    return np.where(in_range, theta, wrapped) + 0.0


@dataclass(frozen=True)
class Point:
    """A single sensor return: position plus optional per-point features."""

    x: float
    y: float
    z: float
    feature: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError("point coordinates must be finite")


class PointCloud:
    """An unordered set of points stored as dense arrays.

    Attributes:
        xyz: (N, 3) float array of positions.
        feats: (N, F) float array of per-point sensor features; F may be 0.
    """

    def __init__(self, xyz: np.ndarray, feats: np.ndarray | None = None):
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point coordinates must be finite")
        if feats is None:
            feats = np.zeros((len(xyz), 0))
        feats = np.asarray(feats, dtype=float)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1)
        if len(feats) != len(xyz):
            raise ValueError(
                f"feature rows ({len(feats)}) must match points ({len(xyz)})"
            )
        self.xyz = xyz
        self.feats = feats

    @classmethod
    def from_points(cls, points: list[Point]) -> "PointCloud":
        if not points:
            return cls(np.zeros((0, 3)))
        dims = {len(p.feature) for p in points}
        if len(dims) > 1:
            raise ValueError("all points must share the same feature length")
        xyz = np.array([[p.x, p.y, p.z] for p in points])
        feats = np.array([p.feature for p in points]).reshape(len(points), -1)
        return cls(xyz, feats)

    @property
    def feature_dim(self) -> int:
        return self.feats.shape[1]

    def __len__(self) -> int:
        return len(self.xyz)

    def point(self, i: int) -> Point:
        x, y, z = self.xyz[i]
        return Point(x, y, z, tuple(self.feats[i]))


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D bounding box; heading is wrapped to (-pi, pi] at creation."""

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    heading: float

    def __post_init__(self) -> None:
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError("box dimensions must be positive")
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def bev_area(self) -> float:
        return self.length * self.width

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    def corners_bev(self) -> np.ndarray:
        """(4, 2) array of footprint corners in counter-clockwise order."""
        return box_corners_bev(np.array([self.as_array()]))[0]

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.cx, self.cy, self.cz, self.length, self.width, self.height,
             self.heading]
        )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Box3D":
        return cls(*(float(v) for v in arr[:7]))


@dataclass(frozen=True)
class Pose2D:
    """Rigid 2D transform (rotate by yaw, then translate); z is untouched."""

    tx: float
    ty: float
    yaw: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def compose(self, other: "Pose2D") -> "Pose2D":
        """Transform equal to applying ``other`` first, then ``self``."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(
            tx=self.tx + c * other.tx - s * other.ty,
            ty=self.ty + s * other.tx + c * other.ty,
            yaw=wrap_angle(self.yaw + other.yaw),
        )

    def inverse(self) -> "Pose2D":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(
            tx=-(c * self.tx + s * self.ty),
            ty=-(-s * self.tx + c * self.ty),
            yaw=wrap_angle(-self.yaw),
        )


IDENTITY_POSE = Pose2D(0.0, 0.0, 0.0)


def apply_pose_xy(pose: Pose2D, xy: np.ndarray) -> np.ndarray:
    """Apply a rigid 2D transform to an (N, 2) or (2,) array of positions."""
    xy = np.asarray(xy, dtype=float)
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    rot = np.array([[c, -s], [s, c]])
    return xy @ rot.T + np.array([pose.tx, pose.ty])


def apply_pose_box(pose: Pose2D, box: Box3D) -> Box3D:
    """Transform a box center in the plane and shift its heading by the yaw."""
    x, y = apply_pose_xy(pose, np.array([box.cx, box.cy]))
    return Box3D(
        cx=float(x), cy=float(y), cz=box.cz,
        length=box.length, width=box.width, height=box.height,
        heading=wrap_angle(box.heading + pose.yaw),
    )


def apply_pose(pose: Pose2D, value):
    """Dispatch :func:`apply_pose_box` / :func:`apply_pose_xy` on input type."""
    if isinstance(value, Box3D):
        return apply_pose_box(pose, value)
    return apply_pose_xy(pose, value)


# ---------------------------------------------------------------------------
# Box arrays: most callers work on (N, 7) arrays [cx, cy, cz, l, w, h, heading]
# ---------------------------------------------------------------------------

def boxes_to_array(boxes: list[Box3D]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


def array_to_boxes(arr: np.ndarray) -> list[Box3D]:
    return [Box3D.from_array(row) for row in np.asarray(arr, dtype=float)]


def box_corners_bev(boxes: np.ndarray) -> np.ndarray:
    """Footprint corners for (N, 7) box arrays -> (N, 4, 2), CCW order."""
    boxes = np.asarray(boxes, dtype=float)
    half_l = boxes[:, 3] / 2.0
    half_w = boxes[:, 4] / 2.0
    # CCW in the box frame when x is forward (length) and y is left (width)
    template = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float)
    local = template[None, :, :] * np.stack([half_l, half_w], axis=1)[:, None, :]
    c = np.cos(boxes[:, 6])
    s = np.sin(boxes[:, 6])
    rot = np.stack([np.stack([c, -s], axis=1), np.stack([s, c], axis=1)], axis=1)
    return np.einsum("nij,nkj->nki", rot, local) + boxes[:, None, :2]


def polygon_area(poly: list[tuple[float, float]]) -> float:
    """Shoelace area of a polygon given as CCW vertex list."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


# The intersection of two convex quadrilaterals has at most 8 vertices; one
# half-plane clip grows a convex polygon by at most one vertex, so a 12-wide
# padded vertex buffer has slack even for near-degenerate inputs.
_CLIP_BUF = 12


def _clip_halfplane_batch(
    verts: np.ndarray, counts: np.ndarray, a: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sutherland-Hodgman step for M padded polygons against M directed edges.

    Keeps the region to the left of each edge a->b. ``verts`` is (M, V, 2)
    with per-row valid ``counts``.
    """
    m, v, _ = verts.shape
    cols = np.arange(v)
    valid = cols[None, :] < counts[:, None]
    safe_counts = np.maximum(counts, 1)
    nxt = (cols[None, :] + 1) % safe_counts[:, None]
    rows = np.arange(m)[:, None]
    p = verts
    q = verts[rows, nxt]

    e = b - a
    side_p = (
        e[:, None, 0] * (p[:, :, 1] - a[:, None, 1])
        - e[:, None, 1] * (p[:, :, 0] - a[:, None, 0])
    ) >= 0.0
    side_q = (
        e[:, None, 0] * (q[:, :, 1] - a[:, None, 1])
        - e[:, None, 1] * (q[:, :, 0] - a[:, None, 0])
    ) >= 0.0

    d = q - p
    denom = e[:, None, 0] * d[:, :, 1] - e[:, None, 1] * d[:, :, 0]
    safe_denom = np.where(denom == 0.0, 1.0, denom)
    t = (
        e[:, None, 0] * (a[:, None, 1] - p[:, :, 1])
        - e[:, None, 1] * (a[:, None, 0] - p[:, :, 0])
    ) / safe_denom
    inter = np.where((denom == 0.0)[:, :, None], q, p + t[:, :, None] * d)

    # Each input vertex owns two output slots: itself, then a crossing point.
    emit = np.zeros((m, 2 * v), dtype=bool)
    emit[:, 0::2] = valid & side_p
    emit[:, 1::2] = valid & (side_p != side_q)
    slot_pts = np.empty((m, 2 * v, 2))
    slot_pts[:, 0::2] = p
    slot_pts[:, 1::2] = inter

    new_idx = np.minimum(np.cumsum(emit, axis=1) - 1, _CLIP_BUF - 1)
    out_counts = new_idx[:, -1] + 1
    out = np.zeros((m, _CLIP_BUF, 2))
    r, c = np.nonzero(emit)
    out[r, new_idx[r, c]] = slot_pts[r, c]
    return out, out_counts.astype(int)


def _padded_polygon_areas(verts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Shoelace areas of M padded polygons."""
    m, v, _ = verts.shape
    cols = np.arange(v)
    valid = cols[None, :] < counts[:, None]
    safe_counts = np.maximum(counts, 1)
    nxt = (cols[None, :] + 1) % safe_counts[:, None]
    rows = np.arange(m)[:, None]
    q = verts[rows, nxt]
    cross = verts[:, :, 0] * q[:, :, 1] - q[:, :, 0] * verts[:, :, 1]
    areas = 0.5 * np.where(valid, cross, 0.0).sum(axis=1)
    return np.where(counts >= 3, areas, 0.0)


def intersection_areas(corners_a: np.ndarray, corners_b: np.ndarray) -> np.ndarray:
    """Pairwise intersection areas for M pairs of convex quads (M, 4, 2)."""
    corners_a = np.asarray(corners_a, dtype=float).reshape(-1, 4, 2)
    corners_b = np.asarray(corners_b, dtype=float).reshape(-1, 4, 2)
    m = len(corners_a)
    if m == 0:
        return np.zeros(0)
    verts = np.zeros((m, _CLIP_BUF, 2))
    verts[:, :4] = corners_a
    counts = np.full(m, 4, dtype=int)
    for edge in range(4):
        a = corners_b[:, edge]
        b = corners_b[:, (edge + 1) % 4]
        verts, counts = _clip_halfplane_batch(verts, counts, a, b)
    areas = _padded_polygon_areas(verts, counts)
    return np.where(areas > _AREA_EPS, areas, 0.0)


def _intersection_area(corners_a: np.ndarray, corners_b: np.ndarray) -> float:
    return float(intersection_areas(corners_a[None], corners_b[None])[0])


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Intersection-over-union of two boxes' rotated footprints.

    Raises:
        ValueError: if either footprint has zero area.
    """
    area_a, area_b = a.bev_area, b.bev_area
    if area_a <= _AREA_EPS or area_b <= _AREA_EPS:
        raise ValueError("IoU of a degenerate (zero-area) box is undefined")
    inter = _intersection_area(a.corners_bev(), b.corners_bev())
    if inter == 0.0:
        return 0.0
    return inter / (area_a + area_b - inter)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: rotated footprint overlap times vertical overlap over volume union."""
    if a.volume <= _AREA_EPS or b.volume <= _AREA_EPS:
        raise ValueError("IoU of a degenerate (zero-volume) box is undefined")
    inter_bev = _intersection_area(a.corners_bev(), b.corners_bev())
    z_lo = max(a.cz - a.height / 2.0, b.cz - b.height / 2.0)
    z_hi = min(a.cz + a.height / 2.0, b.cz + b.height / 2.0)
    inter = inter_bev * max(0.0, z_hi - z_lo)
    if inter <= _AREA_EPS:
        return 0.0
    return inter / (a.volume + b.volume - inter)


def bev_iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise BEV IoU for (Na, 7) x (Nb, 7) box arrays.

    Pairs whose footprint circumcircles do not overlap are zero without
    clipping, which keeps large anchor-versus-label matrices cheap.
    """
    boxes_a = np.asarray(boxes_a, dtype=float)
    boxes_b = np.asarray(boxes_b, dtype=float)
    na, nb = len(boxes_a), len(boxes_b)
    out = np.zeros((na, nb))
    if na == 0 or nb == 0:
        return out
    areas_a = boxes_a[:, 3] * boxes_a[:, 4]
    areas_b = boxes_b[:, 3] * boxes_b[:, 4]
    if np.any(areas_a <= _AREA_EPS) or np.any(areas_b <= _AREA_EPS):
        raise ValueError("IoU of a degenerate (zero-area) box is undefined")
    rad_a = 0.5 * np.hypot(boxes_a[:, 3], boxes_a[:, 4])
    rad_b = 0.5 * np.hypot(boxes_b[:, 3], boxes_b[:, 4])
    d2 = (
        (boxes_a[:, None, 0] - boxes_b[None, :, 0]) ** 2
        + (boxes_a[:, None, 1] - boxes_b[None, :, 1]) ** 2
    )
    candidates = d2 < (rad_a[:, None] + rad_b[None, :]) ** 2
    if not candidates.any():
        return out
    corners_a = box_corners_bev(boxes_a)
    corners_b = box_corners_bev(boxes_b)
    ia, ib = np.nonzero(candidates)
    inter = intersection_areas(corners_a[ia], corners_b[ib])
    out[ia, ib] = inter / (areas_a[ia] + areas_b[ib] - inter)
    return out


def points_in_box(cloud: PointCloud, box: Box3D) -> int:
    """Count cloud points inside the box (boundaries inclusive)."""
    return int(np.count_nonzero(points_in_box_mask(cloud.xyz, box)))


def points_in_box_mask(xyz: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of the rows of (N, 3) ``xyz`` contained in ``box``."""
    xyz = np.asarray(xyz, dtype=float)
    if len(xyz) == 0:
        return np.zeros(0, dtype=bool)
    dx = xyz[:, 0] - box.cx
    dy = xyz[:, 1] - box.cy
    c, s = math.cos(box.heading), math.sin(box.heading)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (
        (np.abs(u) <= box.length / 2.0)
        & (np.abs(v) <= box.width / 2.0)
        & (np.abs(xyz[:, 2] - box.cz) <= box.height / 2.0)
    )
