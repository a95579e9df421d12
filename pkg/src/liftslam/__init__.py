"""Monocular keyframe visual SLAM with learned-feature loss math, image
distortion tooling and trajectory evaluation."""

__version__ = "0.1.0"

from .errors import LiftSlamError  # noqa: E402
from .geometry import CameraIntrinsics, PoseSE3, Sim3  # noqa: E402

__all__ = ["CameraIntrinsics", "LiftSlamError", "PoseSE3", "Sim3", "__version__"]
