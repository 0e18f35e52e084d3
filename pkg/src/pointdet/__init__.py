"""Point-cloud object detection with sampled proposals, local point-set
featurization, data-dependent anchor heads, and desk-scale synthetic
benchmarks."""

from .detector import PointCloudDetector
from .evaluation import EvalConfig
from .frame import Frame
from .geometry import Box3D, Point, PointCloud, Pose2D
from .heads import AnchorConfig
from .pipeline import (
    Checkpoint,
    InferenceConfig,
    ModelConfig,
    TrainConfig,
    detect,
    detect_sequence,
    flops_estimate,
    sweep,
    train,
)
from .postprocess import Detection
from .scenes import ObjectClassConfig, SceneGenConfig, generate_scene, generate_sequence

__all__ = [
    "AnchorConfig",
    "Box3D",
    "Checkpoint",
    "Detection",
    "EvalConfig",
    "Frame",
    "InferenceConfig",
    "ModelConfig",
    "ObjectClassConfig",
    "Point",
    "PointCloud",
    "PointCloudDetector",
    "Pose2D",
    "SceneGenConfig",
    "TrainConfig",
    "detect",
    "detect_sequence",
    "flops_estimate",
    "generate_scene",
    "generate_sequence",
    "sweep",
    "train",
]

__version__ = "0.1.0"
