"""Plane model, single-plane RANSAC and the sequential multi-plane baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFitError, InputError, InsufficientPointsError, NoPlaneFoundError
from .geom import PointCloud

DEFAULT_THRESHOLD = 0.005
DEFAULT_ITERATIONS = 200


@dataclass(frozen=True)
class Plane:
    """{x : normal . x + offset = 0}, stored with a canonical sign."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm < 1e-12:
            raise DegenerateFitError("plane normal has zero length")
        n = n / norm
        d = float(self.offset) / norm
        nz = np.nonzero(np.abs(n) > 1e-12)[0]
        if n[nz[0]] < 0:
            n, d = -n, -d
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", d)

    @classmethod
    def from_points(cls, a, b, c) -> "Plane":
        n = np.cross(np.subtract(b, a), np.subtract(c, a))
        if np.linalg.norm(n) < 1e-9:
            raise DegenerateFitError("collinear points")
        return cls(n, -float(np.dot(n, a)))

    def distance(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.abs(p @ self.normal + self.offset)

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal + self.offset

    def __eq__(self, other):
        if not isinstance(other, Plane):
            return NotImplemented
        return np.allclose(self.normal, other.normal, atol=1e-9) and abs(self.offset - other.offset) <= 1e-9

    __hash__ = None


def point_plane_distance(plane: Plane, p) -> float:
    return float(abs(np.dot(plane.normal, p) + plane.offset))


def fit_plane_lsq(points) -> Plane:
    """Total-least-squares plane through the centroid."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) < 3:
        raise DegenerateFitError("need at least 3 points")
    c = p.mean(axis=0)
    q = p - c
    evals, evecs = np.linalg.eigh(q.T @ q)
    if evals[1] <= 1e-12 * max(evals[2], 1e-300) or evals[2] <= 1e-300:
        raise DegenerateFitError("points are collinear or coincident")
    n = evecs[:, 0]
    return Plane(n, -float(n @ c))


@dataclass(frozen=True)
class RansacParams:
    inlier_threshold: float = DEFAULT_THRESHOLD
    max_iterations: int = DEFAULT_ITERATIONS
    min_inliers: int = 50
    seed: int = 0

    def __post_init__(self):
        if not self.inlier_threshold > 0:
            raise InputError("inlier_threshold must be positive")
        if self.max_iterations < 1:
            raise InputError("max_iterations must be >= 1")
        if self.min_inliers < 3:
            raise InputError("min_inliers must be >= 3")

    @staticmethod
    def default_min_inliers(n: int) -> int:
        return max(50, int(np.ceil(0.005 * n)))


@dataclass
class RansacResult:
    plane: Plane
    inliers: np.ndarray
    consensus: int  # best hypothesis support before the refit


def _hypotheses(points: np.ndarray, n_hyp: int, rng: np.random.Generator):
    """Draw 3-point samples until ``n_hyp`` non-degenerate planes are found."""
    m = len(points)
    normals, offsets = [], []
    found, draws = 0, 0
    max_draws = 20 * n_hyp + 100
    while found < n_hyp and draws < max_draws:
        batch = max(n_hyp - found, 16)
        tri = rng.integers(0, m, size=(batch, 3))
        draws += batch
        distinct = (tri[:, 0] != tri[:, 1]) & (tri[:, 0] != tri[:, 2]) & (tri[:, 1] != tri[:, 2])
        a, b, c = points[tri[:, 0]], points[tri[:, 1]], points[tri[:, 2]]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1)
        ok = distinct & (norm > 1e-9)
        ok_idx = np.nonzero(ok)[0][: n_hyp - found]
        n = n[ok_idx] / norm[ok_idx, None]
        normals.append(n)
        offsets.append(-np.einsum("ij,ij->i", n, a[ok_idx]))
        found += len(ok_idx)
    if not found:
        return np.empty((0, 3)), np.empty(0)
    return np.vstack(normals), np.concatenate(offsets)


def ransac_plane(points, params: RansacParams) -> RansacResult:
    """Classic 3-point RANSAC with one least-squares refit and recount.

    Degenerate samples (repeated or collinear points) are redrawn and do not
    count towards ``max_iterations``. The best hypothesis wins ties by
    drawing order. If the refit plane supports fewer points than the winning
    hypothesis, the hypothesis plane is kept.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise InsufficientPointsError(f"RANSAC needs 3 points, got {len(pts)}")
    rng = np.random.default_rng(params.seed)
    normals, offsets = _hypotheses(pts, params.max_iterations, rng)
    if len(normals) == 0:
        raise NoPlaneFoundError("no non-degenerate 3-point sample")

    thr = params.inlier_threshold
    counts = np.empty(len(normals), dtype=np.int64)
    chunk = max(1, 4_000_000 // len(pts))
    for s in range(0, len(normals), chunk):
        d = np.abs(pts @ normals[s : s + chunk].T + offsets[s : s + chunk])
        counts[s : s + chunk] = np.count_nonzero(d < thr, axis=0)
    best = int(np.argmax(counts))
    consensus = int(counts[best])
    if consensus < params.min_inliers:
        raise NoPlaneFoundError(f"best consensus {consensus} < min_inliers {params.min_inliers}")

    plane = Plane(normals[best], offsets[best])
    inliers = np.nonzero(plane.distance(pts) < thr)[0]
    try:
        refit = fit_plane_lsq(pts[inliers])
        refit_inliers = np.nonzero(refit.distance(pts) < thr)[0]
        if len(refit_inliers) >= len(inliers):
            plane, inliers = refit, refit_inliers
    except DegenerateFitError:
        pass
    return RansacResult(plane, inliers, consensus)


def sequential_multiplane(cloud, params: RansacParams, max_planes: int = 20) -> np.ndarray:
    """Extract planes one after another from the residual points.

    Labels follow extraction order; points never claimed stay -1. Each
    round reseeds from ``params.seed`` plus the round number.
    """
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if n < 3:
        raise InsufficientPointsError("need at least 3 points")
    labels = np.full(n, -1, dtype=np.int64)
    remaining = np.arange(n)
    for label in range(max_planes):
        if len(remaining) < max(3, params.min_inliers):
            break
        round_params = RansacParams(params.inlier_threshold, params.max_iterations, params.min_inliers, params.seed + label)
        try:
            res = ransac_plane(pts[remaining], round_params)
        except NoPlaneFoundError:
            break
        labels[remaining[res.inliers]] = label
        remaining = np.delete(remaining, res.inliers)
    return labels
