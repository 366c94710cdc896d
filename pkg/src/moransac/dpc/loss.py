"""Subplane assignment, RANSAC pseudo-labels and the contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import InputError, NoPlaneFoundError
from ..geom import PointCloud
from ..plane_ransac import Plane, RansacParams, ransac_plane
from .net import VotingNet


@dataclass
class SubplaneClustering:
    labels: np.ndarray           # (N,) representative id per point
    representatives: np.ndarray  # (K, 3) voted positions of the sampled points
    voted: np.ndarray            # (N, 3) x + dx
    sample_indices: np.ndarray   # (K,) point index of each representative

    @property
    def k(self) -> int:
        return len(self.sample_indices)


@dataclass
class ClusterLabel:
    inliers: np.ndarray
    outliers: np.ndarray
    plane: Optional[Plane] = None
    skipped: bool = False


@dataclass
class PseudoLabels:
    clusters: list  # ClusterLabel per representative, indices into the cloud


def assign_clusters(voted, sample_indices, chunk: int = 8192) -> SubplaneClustering:
    """Label every voted point with its nearest representative (L2, lowest id on ties)."""
    voted = np.asarray(voted, dtype=np.float64).reshape(-1, 3)
    idx = np.asarray(sample_indices, dtype=np.int64).reshape(-1)
    if len(idx) == 0:
        raise InputError("no sample indices")
    if len(np.unique(idx)) != len(idx):
        raise InputError("duplicate sample indices")
    if idx.min() < 0 or idx.max() >= len(voted):
        raise InputError("sample index out of range")
    reps = voted[idx]
    labels = np.empty(len(voted), dtype=np.int64)
    for s in range(0, len(voted), chunk):
        d = np.sum((voted[s : s + chunk, None, :] - reps[None, :, :]) ** 2, axis=2)
        labels[s : s + chunk] = np.argmin(d, axis=1)
    return SubplaneClustering(labels, reps, voted, idx)


def pseudo_labels(cloud, clustering: SubplaneClustering, params: RansacParams) -> PseudoLabels:
    """Per-cluster RANSAC on the original (unvoted) coordinates.

    Clusters with fewer than 3 members are skipped. A cluster where RANSAC
    finds no plane keeps all its members as outliers and no plane.
    """
    pos = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    order = np.argsort(clustering.labels, kind="stable")
    bounds = np.searchsorted(clustering.labels[order], np.arange(clustering.k + 1))
    out = []
    for k in range(clustering.k):
        members = order[bounds[k] : bounds[k + 1]]
        if len(members) < 3:
            out.append(ClusterLabel(members[:0], members, None, skipped=True))
            continue
        p = RansacParams(params.inlier_threshold, params.max_iterations, params.min_inliers, params.seed * 1_000_003 + k)
        try:
            res = ransac_plane(pos[members], p)
        except NoPlaneFoundError:
            out.append(ClusterLabel(members[:0], members, None))
            continue
        mask = np.zeros(len(members), dtype=bool)
        mask[res.inliers] = True
        out.append(ClusterLabel(members[mask], members[~mask], res.plane))
    return PseudoLabels(out)


def _norm_and_grad(diff: np.ndarray, norm: str):
    if norm == "l1":
        return np.abs(diff).sum(axis=1), np.sign(diff)
    if norm == "l2":
        d = np.linalg.norm(diff, axis=1)
        g = np.divide(diff, d[:, None], out=np.zeros_like(diff), where=d[:, None] > 0)
        return d, g
    raise InputError(f"unknown norm {norm!r}")


def loss_and_vote_grad(voted, sample_indices, labels: PseudoLabels, alpha: float = 3.0, norm: str = "l1"):
    """Loss L, per-cluster L_k and dL/d(voted points).

    Assignment and pseudo-labels are constants here; gradient reaches a
    voted point both as a cluster member and as a representative.
    """
    if alpha <= 0:
        raise InputError("alpha must be positive")
    voted = np.asarray(voted, dtype=np.float64)
    sample_indices = np.asarray(sample_indices, dtype=np.int64)
    k_total = len(labels.clusters)
    per_cluster = np.zeros(k_total)
    grad = np.zeros_like(voted)
    active = 0
    for k, cl in enumerate(labels.clusters):
        if cl.skipped:
            continue
        active += 1
        rep_idx = sample_indices[k]
        rep = voted[rep_idx]
        if len(cl.inliers):
            diff = voted[cl.inliers] - rep
            dist, g = _norm_and_grad(diff, norm)
            w = 1.0 / len(cl.inliers)
            per_cluster[k] += w * dist.sum()
            np.add.at(grad, cl.inliers, w * g)
            grad[rep_idx] -= w * g.sum(axis=0)
        if len(cl.outliers):
            diff = voted[cl.outliers] - rep
            dist, g = _norm_and_grad(diff, norm)
            w = 1.0 / len(cl.outliers)
            hinge = alpha - dist
            on = hinge > 0
            per_cluster[k] += w * hinge[on].sum()
            g = -g * on[:, None]
            np.add.at(grad, cl.outliers, w * g)
            grad[rep_idx] -= w * g.sum(axis=0)
    if active == 0:
        return 0.0, per_cluster, grad
    return float(per_cluster.sum() / active), per_cluster, grad / active


def contrastive_loss(clustering: SubplaneClustering, labels: PseudoLabels, alpha: float = 3.0, norm: str = "l1"):
    """Return (L, per-cluster L_k)."""
    loss, per_cluster, _ = loss_and_vote_grad(clustering.voted, clustering.sample_indices, labels, alpha, norm)
    return loss, per_cluster


def loss_gradients(net: VotingNet, cloud9d, sample_indices, labels: PseudoLabels, alpha: float = 3.0,
                   norm: str = "l1", training: bool = True, update_stats: bool = False):
    """Exact parameter gradients of the loss; returns (L, grads)."""
    x = np.asarray(cloud9d, dtype=np.float64)
    votes, cache = net.forward(x, training=training, update_stats=update_stats)
    voted = x[:, :3] + votes
    loss, _, dvoted = loss_and_vote_grad(voted, sample_indices, labels, alpha, norm)
    return loss, net.backward(cache, dvoted)
