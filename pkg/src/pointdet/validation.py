"""Input validation helpers shared by the estimator API and the CLI."""

from __future__ import annotations

import numpy as np

from .frame import Frame


def check_frame(frame, name: str = "frame") -> Frame:
    """Validate a single frame: types, finite coordinates, consistent labels."""
    if not isinstance(frame, Frame):
        raise TypeError(f"{name} must be a Frame, got {type(frame).__name__}")
    if not np.all(np.isfinite(frame.cloud.xyz)):
        raise ValueError(f"{name} contains non-finite point coordinates")
    if frame.cloud.feats.shape[0] != frame.cloud.xyz.shape[0]:
        raise ValueError(f"{name} has inconsistent feature rows")
    for i, (box, class_id) in enumerate(frame.labels):
        if min(box.length, box.width, box.height) <= 0:
            raise ValueError(f"{name}.labels[{i}] has non-positive dimensions")
        if int(class_id) != class_id:
            raise ValueError(f"{name}.labels[{i}] class id must be an integer")
    return frame


def check_frames(X, name: str = "X") -> list[Frame]:
    """Accept one frame or an iterable of frames; return a validated list."""
    if isinstance(X, Frame):
        return [check_frame(X, name)]
    try:
        frames = list(X)
    except TypeError:
        raise TypeError(
            f"{name} must be a Frame or an iterable of Frames, "
            f"got {type(X).__name__}"
        ) from None
    if not frames:
        raise ValueError(f"{name} is empty")
    return [check_frame(f, f"{name}[{i}]") for i, f in enumerate(frames)]


def check_feature_dim(frames: list[Frame], expected: int, name: str = "X") -> None:
    dims = {f.cloud.feature_dim for f in frames}
    if dims - {expected}:
        raise ValueError(
            f"{name} carries point feature dims {sorted(dims)}, "
            f"the model expects {expected}"
        )
