"""Neural RGB-D SLAM with multiple tri-plane hash-encoded TSDF submaps."""

from .geometry import CameraIntrinsics, Pose
from .kernels import BACKEND

__all__ = ["BACKEND", "CameraIntrinsics", "Pose"]
__version__ = "0.1.0"
