"""The frame record: one point cloud with its labels and vehicle pose."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    IDENTITY_POSE,
    Box3D,
    PointCloud,
    Pose2D,
    boxes_to_array,
    points_in_box_mask,
)


@dataclass
class Frame:
    """A point cloud plus labels, both in the frame's vehicle coordinates."""

    cloud: PointCloud
    labels: list[tuple[Box3D, int]] = field(default_factory=list)
    pose: Pose2D = IDENTITY_POSE  # world-to-vehicle
    timestamp: float = 0.0

    def label_boxes(self) -> np.ndarray:
        return boxes_to_array([box for box, _ in self.labels])

    def label_classes(self) -> np.ndarray:
        return np.array([c for _, c in self.labels], dtype=int)

    def label_point_counts(self) -> np.ndarray:
        return np.array(
            [
                int(points_in_box_mask(self.cloud.xyz, box).sum())
                for box, _ in self.labels
            ],
            dtype=int,
        )
