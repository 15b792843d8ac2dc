"""Camera calibration and multi-person 3D pose from sparse, uncalibrated RGBD views."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import IngestionError, MvdError, NumericalError, ParameterError
from .geometry import CameraIntrinsics, DepthImage, RigidTransform, Skeleton2D, Skeleton3D
from .pipeline import PipelineConfig, PipelineResult, run_pipeline
from .simulator import SceneConfig, generate_frame, generate_sequence

__all__ = [
    "CameraIntrinsics",
    "DepthImage",
    "IngestionError",
    "MvdError",
    "NumericalError",
    "ParameterError",
    "PipelineConfig",
    "PipelineResult",
    "RigidTransform",
    "SceneConfig",
    "Skeleton2D",
    "Skeleton3D",
    "__version__",
    "generate_frame",
    "generate_sequence",
    "run_pipeline",
]
