"""Online dense reconstruction: plane-sweep MVS depth, multi-view depth
fusion, and incremental generalized-exponential splat mapping."""

from .geometry import (CameraIntrinsics, ConfidenceMap, DepthMap, ImageBuffer,
                       Pose)

__all__ = ["CameraIntrinsics", "ConfidenceMap", "DepthMap", "ImageBuffer",
           "Pose"]

__version__ = "0.1.0"
