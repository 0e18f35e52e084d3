"""Binary file formats: frame files (point clouds + labels + poses) and
model checkpoints.

Both formats are little-endian with a magic header and an explicit version.
Frame payloads are stored at 32-bit float precision (round-trips are
bitwise-lossless at that precision); checkpoints store each parameter array
at its native dtype together with the canonical model-config JSON and its
SHA-256, so a corrupted or mismatched header fails loudly.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .frame import Frame
from .geometry import Box3D, PointCloud, Pose2D
from .pipeline import Checkpoint, init_checkpoint


class FormatError(ValueError):
    """Base class for malformed artifact files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class FeatureDimError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


FRAME_MAGIC = b"PDFR"
FRAME_VERSION = 1
CHECKPOINT_MAGIC = b"PDCK"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class _Reader:
    def __init__(self, data: bytes, label: str):
        self.data = data
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.label}: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def array(self, dtype: np.dtype, shape: tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        raw = self.take(n * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


# ---------------------------------------------------------------------------
# Frame files
# ---------------------------------------------------------------------------

def write_frames(frames: list[Frame], path: str | Path) -> None:
    """Serialize frames; every frame must share one feature dimension."""
    dims = {f.cloud.feature_dim for f in frames}
    if len(dims) > 1:
        raise FeatureDimError(f"frames have mixed feature dims {sorted(dims)}")
    feature_dim = dims.pop() if dims else 0
    parts = [
        FRAME_MAGIC,
        struct.pack("<I", FRAME_VERSION),
        struct.pack("<I", feature_dim),
        struct.pack("<I", len(frames)),
    ]
    for frame in frames:
        parts.append(struct.pack("<d", frame.timestamp))
        parts.append(
            np.array([frame.pose.tx, frame.pose.ty, frame.pose.yaw],
                     dtype="<f4").tobytes()
        )
        pts = np.concatenate([frame.cloud.xyz, frame.cloud.feats], axis=1)
        parts.append(struct.pack("<I", len(pts)))
        parts.append(pts.astype("<f4").tobytes())
        parts.append(struct.pack("<I", len(frame.labels)))
        if frame.labels:
            boxes = np.stack([box.as_array() for box, _ in frame.labels])
            classes = np.array([c for _, c in frame.labels], dtype="<i4")
            parts.append(boxes.astype("<f4").tobytes())
            parts.append(classes.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_frames(path: str | Path) -> list[Frame]:
    """Parse a frame file; malformed input raises a specific FormatError."""
    reader = _Reader(Path(path).read_bytes(), str(path))
    magic = reader.take(4)
    if magic != FRAME_MAGIC:
        raise BadMagicError(f"{path}: not a frame file (magic {magic!r})")
    version = reader.u32()
    if version != FRAME_VERSION:
        raise VersionMismatchError(
            f"{path}: frame file version {version}, expected {FRAME_VERSION}"
        )
    feature_dim = reader.u32()
    n_frames = reader.u32()
    frames = []
    for _ in range(n_frames):
        timestamp = reader.f64()
        pose_arr = reader.array(np.dtype("<f4"), (3,))
        pose = Pose2D(float(pose_arr[0]), float(pose_arr[1]), float(pose_arr[2]))
        n_points = reader.u32()
        pts = reader.array(np.dtype("<f4"), (n_points, 3 + feature_dim))
        n_labels = reader.u32()
        labels: list[tuple[Box3D, int]] = []
        if n_labels:
            boxes = reader.array(np.dtype("<f4"), (n_labels, 7))
            classes = reader.array(np.dtype("<i4"), (n_labels,))
            labels = [
                (Box3D.from_array(row.astype(float)), int(c))
                for row, c in zip(boxes, classes)
            ]
        cloud = PointCloud(
            pts[:, :3].astype(float), pts[:, 3:].astype(float)
        )
        frames.append(Frame(cloud=cloud, labels=labels, pose=pose,
                            timestamp=timestamp))
    if reader.pos != len(reader.data):
        raise TruncatedFileError(
            f"{path}: {len(reader.data) - reader.pos} trailing bytes"
        )
    return frames


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    from .config import model_config_to_json

    config_json = model_config_to_json(checkpoint.model).encode("utf-8")
    digest = hashlib.sha256(config_json).digest()
    arrays = list(checkpoint.named_arrays())
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(config_json)),
        config_json,
        digest,
        struct.pack("<I", len(arrays)),
    ]
    for name, arr in arrays:
        encoded = name.encode("utf-8")
        dtype = np.dtype(arr.dtype).newbyteorder("<")
        if np.dtype(arr.dtype) not in _DTYPE_TO_CODE:
            raise FormatError(f"cannot serialize dtype {arr.dtype} for {name}")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", _DTYPE_TO_CODE[np.dtype(arr.dtype)]))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Checkpoint:
    from .config import model_config_from_json

    reader = _Reader(Path(path).read_bytes(), str(path))
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (magic {magic!r})")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    config_json = reader.take(reader.u32())
    digest = reader.take(32)
    if hashlib.sha256(config_json).digest() != digest:
        raise ChecksumError(f"{path}: config hash mismatch")
    model = model_config_from_json(config_json.decode("utf-8"))

    loaded: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u16()).decode("utf-8")
        code = reader.u8()
        if code not in _DTYPE_CODES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        ndim = reader.u8()
        shape = tuple(reader.u32() for _ in range(ndim))
        loaded[name] = reader.array(_DTYPE_CODES[code], shape)

    checkpoint = init_checkpoint(model, np.random.default_rng(0))
    if loaded:
        dtype = next(iter(loaded.values())).dtype
        checkpoint = checkpoint.astype(dtype)
    expected = dict(checkpoint.named_arrays())
    missing = set(expected) - set(loaded)
    extra = set(loaded) - set(expected)
    if missing or extra:
        raise FormatError(
            f"{path}: parameter names do not match the config "
            f"(missing {sorted(missing)}, unexpected {sorted(extra)})"
        )
    for name, arr in expected.items():
        if loaded[name].shape != arr.shape:
            raise FormatError(
                f"{path}: array {name} has shape {loaded[name].shape}, "
                f"config implies {arr.shape}"
            )
        arr[...] = loaded[name]
    return checkpoint
