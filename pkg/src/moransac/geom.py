"""Point-cloud containers, spatial search, sampling and normal estimation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError, EmptyCloudError, InputError, InsufficientPointsError

DEFAULT_NORMAL_K = 30


@dataclass(frozen=True)
class PointCloud:
    """N points with optional per-point RGB (in [0, 1]) and unit normals."""

    positions: np.ndarray
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise InputError("positions contain non-finite coordinates")
        object.__setattr__(self, "positions", pos)
        n = len(pos)
        for name in ("colors", "normals"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64).reshape(-1, 3)
            if len(arr) != n:
                raise DimensionError(f"{name} has {len(arr)} rows, positions has {n}")
            object.__setattr__(self, name, arr)
        if self.normals is not None and n:
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise InputError("normals must be unit length")

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(
            self.positions[idx],
            None if self.colors is None else self.colors[idx],
            None if self.normals is None else self.normals[idx],
        )

    def features9d(self) -> np.ndarray:
        """(xyz, rgb, normal) rows; missing colors become zeros."""
        if self.normals is None:
            raise InputError("9D features need normals; run estimate_normals first")
        colors = self.colors if self.colors is not None else np.zeros_like(self.positions)
        return np.hstack([self.positions, colors, self.normals])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    depth_scale: float = 0.001

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.depth_scale <= 0:
            raise InputError("fx, fy and depth_scale must be positive")


def depth_to_cloud(depth, intrinsics: CameraIntrinsics, rgb=None, return_pixels: bool = False):
    """Back-project a depth image through a pinhole camera.

    Zero-depth pixels are dropped. Surviving points follow row-major pixel
    order. With ``return_pixels`` the (row, col) arrays of the kept pixels are
    returned alongside the cloud.
    """
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise DimensionError("depth must be a 2D array")
    if rgb is not None:
        rgb = np.asarray(rgb)
        if rgb.shape[:2] != depth.shape:
            raise DimensionError(f"rgb {rgb.shape[:2]} and depth {depth.shape} resolutions differ")
    rows, cols = np.nonzero(depth > 0)
    if len(rows) == 0:
        raise EmptyCloudError("depth image has no valid pixels")
    z = depth[rows, cols].astype(np.float64) * intrinsics.depth_scale
    x = (cols - intrinsics.cx) * z / intrinsics.fx
    y = (rows - intrinsics.cy) * z / intrinsics.fy
    colors = None
    if rgb is not None:
        colors = rgb[rows, cols, :3].astype(np.float64)
        if np.issubdtype(rgb.dtype, np.integer):
            colors = colors / 255.0
    cloud = PointCloud(np.stack([x, y, z], axis=1), colors)
    if return_pixels:
        return cloud, (rows, cols)
    return cloud


def project_points(points, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection to (u, v) pixel coordinates; points must have z > 0."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    u = intrinsics.fx * p[:, 0] / p[:, 2] + intrinsics.cx
    v = intrinsics.fy * p[:, 1] / p[:, 2] + intrinsics.cy
    return np.stack([u, v], axis=1)


def knn(targets, queries, k: int) -> np.ndarray:
    """Exact k nearest targets for each query, ascending, ties to the lower index."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    n = len(targets)
    if k > n:
        raise InsufficientPointsError(f"k={k} exceeds {n} targets")
    if k < 1:
        raise InputError("k must be >= 1")
    if len(queries) == 0:
        return np.empty((0, k), dtype=np.int64)
    tree = cKDTree(targets)
    kq = min(k + 1, n)
    _, cand = tree.query(queries, k=kq)
    cand = cand.reshape(len(queries), kq).astype(np.int64)
    cand = np.sort(cand, axis=1)
    d = np.sum((targets[cand] - queries[:, None, :]) ** 2, axis=2)
    order = np.argsort(d, axis=1, kind="stable")
    cand = np.take_along_axis(cand, order, axis=1)
    d = np.take_along_axis(d, order, axis=1)
    out = cand[:, :k].copy()
    if kq > k:
        # the tree's k/k+1 boundary may hide equidistant targets
        for qi in np.nonzero(d[:, k] <= d[:, k - 1] * (1 + 1e-9) + 1e-15)[0]:
            q = queries[qi]
            r = np.sqrt(d[qi, k - 1]) * (1 + 1e-9) + 1e-12
            idx = np.sort(np.asarray(tree.query_ball_point(q, r), dtype=np.int64))
            dd = np.sum((targets[idx] - q) ** 2, axis=1)
            out[qi] = idx[np.argsort(dd, kind="stable")][:k]
    return out


def estimate_normals(
    cloud: PointCloud,
    k: int = DEFAULT_NORMAL_K,
    viewpoint=(0.0, 0.0, 0.0),
    return_flags: bool = False,
):
    """PCA normals from the k-NN covariance, flipped to face ``viewpoint``.

    Neighbourhoods of rank < 2 (collinear or coincident points) get a
    deterministic normal orthogonal to their dominant direction and are
    flagged in the optional boolean array.
    """
    n = len(cloud)
    if k < 3:
        raise InputError("normal estimation needs k >= 3")
    if n < k:
        raise InsufficientPointsError(f"{n} points, need at least k={k}")
    pts = cloud.positions
    nbr = knn(pts, pts, k)
    local = pts[nbr]
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()

    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-12 * scale
    degenerate |= evals[:, 2] <= 1e-24
    for i in np.nonzero(degenerate)[0]:
        normals[i] = _orthogonal_to(evecs[i, :, 2] if evals[i, 2] > 1e-24 else None)

    view = np.asarray(viewpoint, dtype=np.float64) - pts
    flip = np.einsum("ij,ij->i", normals, view) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    out = replace(cloud, normals=normals)
    if return_flags:
        return out, degenerate
    return out


def _orthogonal_to(direction) -> np.ndarray:
    if direction is None:
        return np.array([0.0, 0.0, 1.0])
    d = direction / np.linalg.norm(direction)
    axis = int(np.argmin(np.abs(d)))
    e = np.zeros(3)
    e[axis] = 1.0
    v = e - d * d[axis]
    return v / np.linalg.norm(v)


def voxel_keys(positions: np.ndarray, voxel: float, origin=None) -> np.ndarray:
    """Integer voxel coordinates on a grid anchored at ``origin`` (default: min corner)."""
    if voxel <= 0:
        raise InputError("voxel size must be positive")
    origin = positions.min(axis=0) if origin is None else np.asarray(origin)
    return np.floor((positions - origin) / voxel).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel at the member centroid; channels averaged."""
    if voxel <= 0:
        raise InputError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = voxel_keys(cloud.positions, voxel)
    _, first, inverse, counts = np.unique(keys, axis=0, return_index=True, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)

    def mean_of(arr):
        acc = np.zeros((len(counts), 3))
        np.add.at(acc, inverse, arr)
        return acc / counts[:, None]

    colors = None if cloud.colors is None else mean_of(cloud.colors)
    normals = None
    if cloud.normals is not None:
        normals = mean_of(cloud.normals)
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        # opposite normals can cancel inside one voxel; keep the first member's
        bad = norm[:, 0] < 1e-9
        if np.any(bad):
            normals[bad] = cloud.normals[first[bad]]
            norm[bad] = 1.0
        normals = normals / norm
    return PointCloud(mean_of(cloud.positions), colors, normals)


def downsample_to_count(cloud: PointCloud, target: int, tol: float = 0.05, max_iter: int = 50) -> PointCloud:
    """Bisect the voxel edge so the output has ``target`` points within ``tol``.

    Clouds already at or below the target are returned unchanged. If the
    window cannot be hit (very clumpy data), the closest result is returned.
    """
    n = len(cloud)
    if n <= target * (1 + tol):
        return cloud
    extent = max(float(np.max(np.ptp(cloud.positions, axis=0))), 1e-9)
    lo, hi = np.log(extent * 1e-7), np.log(extent * 2)
    best, best_err = cloud, abs(n - target)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        out = voxel_downsample(cloud, float(np.exp(mid)))
        err = abs(len(out) - target)
        if err < best_err:
            best, best_err = out, err
        if err <= tol * target:
            break
        if len(out) > target:
            lo = mid
        else:
            hi = mid
    return best


def farthest_point_sample(points, k: int, seed: int = 0) -> np.ndarray:
    """Greedy max-min sampling; the first index comes from the seeded RNG."""
    pts = points.positions if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k > n:
        raise InsufficientPointsError(f"cannot sample {k} of {n} points")
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    mind = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
    mind[chosen[0]] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        mind = np.minimum(mind, np.sum((pts - pts[nxt]) ** 2, axis=1))
        mind[chosen[: i + 1]] = -1.0
    return chosen


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    empty: list = field(default_factory=list)
    n_iter: int = 0


def standardize(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    out = np.zeros_like(x)
    ok = sd > 1e-12
    out[:, ok] = (x[:, ok] - mu[ok]) / sd[ok]
    return out


def kmeans(features, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm on per-dimension standardized features.

    Centers start from a seeded farthest-point pass over the standardized
    features. Clusters that end up empty keep their last center and are
    listed in ``empty``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("features must be a 2D array")
    n = len(x)
    if n < k:
        raise InsufficientPointsError(f"{n} points for k={k}")
    z = standardize(x)
    rng = np.random.default_rng(seed)
    init = [int(rng.integers(n))]
    mind = np.sum((z - z[init[0]]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(mind))
        init.append(nxt)
        mind = np.minimum(mind, np.sum((z - z[nxt]) ** 2, axis=1))
    centers = z[init].copy()

    labels = None
    it = 0
    for it in range(1, max_iter + 1):
        d = np.sum((z[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new = np.argmin(d, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if np.any(members):
                centers[c] = z[members].mean(axis=0)
    counts = np.bincount(labels, minlength=k)
    return KMeansResult(labels, centers, [c for c in range(k) if counts[c] == 0], it)
