"""Inference-time subplane generation."""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..geom import PointCloud, farthest_point_sample, kmeans
from ..merge import Cluster
from ..plane_ransac import RansacParams
from .loss import assign_clusters, pseudo_labels
from .net import VotingNet

DEFAULT_K = 64
N_SPLITS = 3


def subplanes_for_split(net: Optional[VotingNet], cloud: PointCloud, members: np.ndarray, k: int,
                        seed: int, params: RansacParams) -> dict:
    """FPS, vote, assign and fit one K-means split; ids are local, indices global."""
    sub = cloud.subset(members)
    k = min(k, len(sub))
    sample = farthest_point_sample(sub.positions, k, seed)
    if net is None:
        voted = sub.positions
    else:
        voted = sub.positions + net.predict(sub.features9d())
    clustering = assign_clusters(voted, sample)
    labels = pseudo_labels(sub, clustering, RansacParams(params.inlier_threshold, params.max_iterations,
                                                         params.min_inliers, seed))
    out = {}
    for c in range(k):
        local = np.nonzero(clustering.labels == c)[0]
        if len(local) == 0:
            continue
        out[c] = Cluster(members[local], labels.clusters[c].plane)
    return out


def infer_subplanes(net: Optional[VotingNet], cloud: PointCloud, k: int = DEFAULT_K, seed: int = 0,
                    params: Optional[RansacParams] = None, n_splits: int = N_SPLITS) -> list:
    """Split the 9D cloud with K-means, then run DPC on each split.

    ``net=None`` is the no-vote ablation: clusters come from FPS samples on
    raw positions. Clusters whose RANSAC failed carry ``plane=None``.
    Returns one ClusterDict per split (empty dict for an empty split).
    """
    params = params or RansacParams(min_inliers=3)
    x = cloud.features9d()
    n_splits = min(n_splits, len(cloud))
    km = kmeans(x, n_splits, seed)
    dicts = []
    for s in range(n_splits):
        members = np.nonzero(km.labels == s)[0]
        if len(members) == 0:
            dicts.append({})
            continue
        dicts.append(subplanes_for_split(net, cloud, members, k, seed * 7919 + s, params))
    return dicts
