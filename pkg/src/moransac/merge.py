"""Graph-based merging of subplane clusters that share a planar surface.

Clusters are vertices of a symmetrized k-NN graph over their centroids. Two
neighbours merge when they come within ``beta`` of each other and one of
them lies mostly (fraction > ``gamma``) within ``delta`` of the other's
plane. Merging repeats until a full pass changes nothing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateFitError, InputError
from .geom import PointCloud
from .plane_ransac import Plane, fit_plane_lsq


@dataclass
class Cluster:
    indices: np.ndarray  # point indices into the original cloud
    plane: Optional[Plane] = None


# cluster id -> Cluster
ClusterDict = dict


@dataclass(frozen=True)
class MergeParams:
    beta: float = 0.2
    gamma: float = 0.9
    delta: float = 0.005
    U: int = 5

    def __post_init__(self):
        if self.beta <= 0 or self.delta <= 0:
            raise InputError("beta and delta must be positive")
        if not 0 < self.gamma <= 1:
            raise InputError("gamma must lie in (0, 1]")
        if self.U < 1:
            raise InputError("U must be >= 1")


@dataclass
class MergeDecision:
    merge: bool
    m_a: float
    m_b: float
    min_d: float


@dataclass
class MergeStats:
    """Instrumentation shared across merge calls."""

    pair_distance_evals: int = 0
    passes: int = 0
    trace: list = field(default_factory=list)  # (pass, id_a, id_b, m_a, m_b, min_d, merged)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["pass", "id_a", "id_b", "m_a", "m_b", "min_d", "merged"])
            for row in self.trace:
                w.writerow([row[0], row[1], row[2], f"{row[3]:.6f}", f"{row[4]:.6f}", f"{row[5]:.6f}", int(row[6])])


def _positions(cloud) -> np.ndarray:
    return cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def build_cluster_graph(clusters: ClusterDict, cloud, U: int, planar_only: bool = False) -> dict:
    """Symmetrized U-nearest-neighbour graph over cluster centroids.

    Returns an adjacency map id -> set of ids. Distance ties go to the lower id.
    """
    pos = _positions(cloud)
    ids = sorted(k for k, c in clusters.items() if not planar_only or c.plane is not None)
    graph = {k: set() for k in ids}
    if len(ids) < 2:
        return graph
    for k in ids:
        if len(clusters[k].indices) == 0:
            raise InputError(f"cluster {k} is empty")
    cent = np.array([pos[clusters[k].indices].mean(axis=0) for k in ids])
    d = np.sum((cent[:, None, :] - cent[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d, np.inf)
    u = min(U, len(ids) - 1)
    for i, k in enumerate(ids):
        for j in np.argsort(d[i], kind="stable")[:u]:
            graph[k].add(ids[j])
            graph[ids[j]].add(k)
    return graph


def min_pair_distance(xa: np.ndarray, xb: np.ndarray, stop_below: float = -1.0, stats: Optional[MergeStats] = None) -> float:
    """Exact minimum distance over all pairs, block by block.

    Stops as soon as a block contains a pair closer than ``stop_below``; the
    returned value is then an upper bound on the true minimum that is still
    below ``stop_below``.
    """
    block = max(1, (1 << 20) // max(len(xb), 1))
    best = np.inf
    stop2 = stop_below * stop_below if stop_below > 0 else -1.0
    for s in range(0, len(xa), block):
        a = xa[s : s + block]
        d2 = np.sum((a[:, None, :] - xb[None, :, :]) ** 2, axis=2)
        if stats is not None:
            stats.pair_distance_evals += d2.size
        best = min(best, float(d2.min()))
        if best < stop2:
            break
    return float(np.sqrt(best))


def try_merge_pair(xa, xb, eq_a: Plane, eq_b: Plane, params: MergeParams,
                   early_exit: bool = False, stats: Optional[MergeStats] = None) -> MergeDecision:
    """Coplanarity fractions and proximity test for one pair of clusters.

    With ``early_exit`` the pair distance scan is skipped when the planes
    already disagree and stops once a pair closer than beta is seen.
    """
    xa = np.asarray(xa, dtype=np.float64).reshape(-1, 3)
    xb = np.asarray(xb, dtype=np.float64).reshape(-1, 3)
    m_a = float(np.mean(eq_b.distance(xa) < params.delta))
    m_b = float(np.mean(eq_a.distance(xb) < params.delta))
    coplanar = max(m_a, m_b) > params.gamma
    if early_exit and not coplanar:
        return MergeDecision(False, m_a, m_b, float("nan"))
    min_d = min_pair_distance(xa, xb, params.beta if early_exit else -1.0, stats)
    return MergeDecision(bool(min_d < params.beta and coplanar), m_a, m_b, min_d)


def merge_process(clusters: ClusterDict, cloud, params: MergeParams = MergeParams(),
                  stats: Optional[MergeStats] = None) -> ClusterDict:
    """Merge neighbouring coplanar clusters until a fixed point.

    Vertices are visited in ascending id order, each sweeping its current
    neighbours in ascending id order. The surviving cluster keeps the lower
    id and its plane is refit on the union. Clusters without a plane never
    merge. Passes are capped at the initial cluster count. Returns a new
    dict; the input is not modified.
    """
    pos = _positions(cloud)
    cur = {k: Cluster(np.asarray(c.indices, dtype=np.int64), c.plane) for k, c in clusters.items()}
    stats = stats if stats is not None else MergeStats()
    version = {k: 0 for k in cur}
    decided = {}
    cap = max(1, len(cur))
    for pass_no in range(cap):
        stats.passes += 1
        graph = build_cluster_graph(cur, pos, params.U, planar_only=True)
        merged_any = False
        for a in sorted(graph):
            if a not in cur:
                continue
            tested = set()
            while True:
                cands = sorted(b for b in graph.get(a, ()) if b in cur and b not in tested)
                if not cands:
                    break
                b = cands[0]
                tested.add(b)
                key = (a, b, version[a], version[b])
                dec = decided.get(key)
                if dec is None:
                    ca, cb = cur[a], cur[b]
                    dec = try_merge_pair(pos[ca.indices], pos[cb.indices], ca.plane, cb.plane, params,
                                         early_exit=True, stats=stats)
                    decided[key] = dec
                    stats.trace.append((pass_no, a, b, dec.m_a, dec.m_b, dec.min_d, dec.merge))
                if dec.merge:
                    union = np.concatenate([cur[a].indices, cur[b].indices])
                    try:
                        plane = fit_plane_lsq(pos[union])
                    except DegenerateFitError:
                        plane = cur[a].plane
                    cur[a] = Cluster(union, plane)
                    version[a] += 1
                    del cur[b]
                    graph = build_cluster_graph(cur, pos, params.U, planar_only=True)
                    merged_any = True
        if not merged_any:
            break
    return cur


def merge_stages(dicts, cloud, params: MergeParams = MergeParams(), stats: Optional[MergeStats] = None) -> ClusterDict:
    """Merge each dict on its own, then merge their union under fresh ids."""
    parts = [np.asarray(c.indices, dtype=np.int64) for d in dicts for c in d.values()]
    if parts:
        every = np.concatenate(parts)
        if len(np.unique(every)) != len(every):
            raise InputError("cluster dicts share point indices")
    union = {}
    for d in dicts:
        merged = merge_process(d, cloud, params, stats)
        for k in sorted(merged):
            union[len(union)] = merged[k]
    return merge_process(union, cloud, params, stats)


def labels_from_clusters(clusters: ClusterDict, n: int) -> np.ndarray:
    """Per-point labels 0..M-1 in ascending cluster-id order; uncovered points are -1."""
    labels = np.full(n, -1, dtype=np.int64)
    for new, k in enumerate(sorted(clusters)):
        labels[clusters[k].indices] = new
    return labels


def two_stage_merge(dicts, cloud, params: MergeParams = MergeParams(), stats: Optional[MergeStats] = None) -> np.ndarray:
    pos = _positions(cloud)
    return labels_from_clusters(merge_stages(dicts, pos, params, stats), len(pos))


def clusters_from_labels(cloud, labels) -> ClusterDict:
    """Rebuild a ClusterDict from per-point labels, fitting a plane per cluster."""
    pos = _positions(cloud)
    labels = np.asarray(labels, dtype=np.int64)
    out = {}
    for k in np.unique(labels[labels >= 0]):
        idx = np.nonzero(labels == k)[0]
        try:
            plane = fit_plane_lsq(pos[idx])
        except DegenerateFitError:
            plane = None
        out[int(k)] = Cluster(idx, plane)
    return out
