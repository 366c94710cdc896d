"""Plane instance segmentation for cluttered RGB-D point clouds."""

from .geom import CameraIntrinsics, PointCloud
from .merge import Cluster, MergeParams
from .plane_ransac import Plane, RansacParams

__version__ = "0.1.0"

__all__ = ["CameraIntrinsics", "PointCloud", "Cluster", "MergeParams", "Plane", "RansacParams"]
