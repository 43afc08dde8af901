"""Differentiable Gaussian splatting with learned planar mirrors."""

from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    InvalidPlaneError,
    MirrorSplatError,
    PlaneEstimationError,
    RenderError,
    SynthesisError,
    TrainingError,
)
from .geometry import CameraModel, PlaneParam, PoseTransform, mirror_camera, mirror_transform
from .scene import GaussianPrimitive, GaussianScene, MirrorDataset, ViewRecord, init_scene

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "CheckpointError",
    "ConfigError",
    "DatasetError",
    "GaussianPrimitive",
    "GaussianScene",
    "InvalidPlaneError",
    "MirrorDataset",
    "MirrorSplatError",
    "PlaneEstimationError",
    "PoseTransform",
    "PlaneParam",
    "RenderError",
    "SynthesisError",
    "TrainingError",
    "ViewRecord",
    "init_scene",
    "mirror_camera",
    "mirror_transform",
    "__version__",
]
