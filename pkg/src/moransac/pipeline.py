"""End-to-end segmentation and suction grasp-point selection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dpc import DEFAULT_K, N_SPLITS, VotingNet, infer_subplanes
from .errors import NoFloorError, NothingToGraspError
from .geom import PointCloud
from .merge import ClusterDict, MergeParams, MergeStats, labels_from_clusters, merge_stages
from .plane_ransac import RansacParams


@dataclass
class SegmentResult:
    labels: np.ndarray
    clusters: ClusterDict
    subplanes: list
    stats: MergeStats


def segment(net: Optional[VotingNet], cloud: PointCloud, k: int = DEFAULT_K, seed: int = 0,
            ransac: Optional[RansacParams] = None, merge: MergeParams = MergeParams(),
            n_splits: int = N_SPLITS) -> SegmentResult:
    """Subplanes per K-means split, then the two merge stages. ``net=None`` skips voting.

    Points of clusters that never got a plane are labelled -1.
    """
    stats = MergeStats()
    subplanes = infer_subplanes(net, cloud, k, seed, ransac, n_splits)
    clusters = merge_stages(subplanes, cloud, merge, stats)
    planar = {k: c for k, c in clusters.items() if c.plane is not None}
    return SegmentResult(labels_from_clusters(planar, len(cloud)), clusters, subplanes, stats)


@dataclass
class GraspChoice:
    point: np.ndarray
    cluster_id: int
    floor_id: int
    height: float


def grasp_point(cloud, clusters: ClusterDict, up=(0.0, 0.0, 1.0), floor_cone_deg: float = 30.0) -> GraspChoice:
    """Centroid of the cluster standing highest above the floor.

    The floor is the largest cluster whose plane normal lies within
    ``floor_cone_deg`` of +/-``up``. Height ties go to the lowest id.
    """
    pos = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    up = up / np.linalg.norm(up)
    cos_cone = np.cos(np.radians(floor_cone_deg))
    planar = sorted(k for k, c in clusters.items() if c.plane is not None and len(c.indices))
    floor_cands = [k for k in planar if abs(clusters[k].plane.normal @ up) >= cos_cone]
    if not floor_cands:
        raise NoFloorError("no cluster with a plane close to horizontal")
    floor = max(floor_cands, key=lambda k: (len(clusters[k].indices), -k))
    fplane = clusters[floor].plane
    sign = 1.0 if fplane.normal @ up >= 0 else -1.0
    best, best_h, best_c = None, -np.inf, None
    for k in planar:
        if k == floor:
            continue
        c = pos[clusters[k].indices].mean(axis=0)
        h = sign * float(fplane.signed_distance(c))
        if h > best_h + 1e-9:
            best, best_h, best_c = k, h, c
    if best is None:
        raise NothingToGraspError("only the floor was found")
    return GraspChoice(best_c, best, floor, best_h)
