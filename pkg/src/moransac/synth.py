"""Synthetic tabletop clutter with exact plane labels, plus RGB-D frame ingestion.

Scenes live in a world frame with the floor at z = 0 and +z up. Objects are
boxes (top face plus up to two camera-facing sides) and cylinders whose
visible half is approximated by flat vertical facets. Every planar face gets
its own ground-truth label; uniform outliers are labelled -1.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .errors import DimensionError, InputError, SpecError
from .geom import CameraIntrinsics, PointCloud, depth_to_cloud, estimate_normals
from .plane_ransac import Plane


@dataclass(frozen=True)
class ObjectSpec:
    kind: str                 # "box" or "cylinder"
    center: tuple             # (x, y) on the floor
    size: tuple               # box: (width, depth, height); cylinder: (radius, height)
    yaw: float = 0.0
    faces: int = 3            # visible box faces, 1..3


@dataclass(frozen=True)
class SceneSpec:
    floor_extent: tuple = (1.0, 1.0)
    n_objects: int = 5
    kinds: tuple = ("box",)
    size_range: tuple = (0.06, 0.2)
    height_range: tuple = (0.04, 0.25)
    yaw_range: tuple = (0.0, np.pi / 2)
    faces_range: tuple = (1, 3)
    points_per_face: int = 300
    floor_points: int = 3000
    noise_sigma: float = 0.001
    outlier_fraction: float = 0.0
    facet_width: float = 0.02
    camera: tuple = (0.0, -0.9, 1.0)
    seed: int = 0
    objects: Optional[tuple] = None   # explicit ObjectSpecs override random placement

    def __post_init__(self):
        fx, fy = self.floor_extent
        if fx <= 0 or fy <= 0:
            raise SpecError("floor extent must be positive")
        if not 0 <= self.outlier_fraction < 1:
            raise SpecError("outlier_fraction must lie in [0, 1)")
        if self.noise_sigma < 0 or self.facet_width <= 0:
            raise SpecError("noise_sigma must be >= 0 and facet_width > 0")
        lo, hi = self.size_range
        hlo, hhi = self.height_range
        if not (0 < lo <= hi and 0 < hlo <= hhi):
            raise SpecError("size and height ranges must be positive")
        if self.points_per_face < 3 or self.floor_points < 0:
            raise SpecError("points_per_face must be >= 3")
        for kind in self.kinds:
            if kind not in ("box", "cylinder"):
                raise SpecError(f"unknown object kind {kind!r}")

    def to_kv(self) -> dict:
        d = asdict(self)
        d.pop("objects")
        return {k: (",".join(str(x) for x in v) if isinstance(v, (tuple, list)) else v) for k, v in d.items()}


@dataclass
class _Face:
    origin: np.ndarray
    axis_u: np.ndarray      # spans the face, length = extent
    axis_v: np.ndarray
    normal: np.ndarray
    color: np.ndarray
    disc_radius: float = 0.0  # > 0 for a disc centered at origin


def _rot(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _footprint_radius(obj: ObjectSpec) -> float:
    if obj.kind == "box":
        return 0.5 * float(np.hypot(obj.size[0], obj.size[1]))
    return float(obj.size[0])


def _random_objects(spec: SceneSpec, rng) -> list:
    fx, fy = spec.floor_extent
    objs, placed = [], []
    for _ in range(spec.n_objects):
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        h = rng.uniform(*spec.height_range)
        if kind == "box":
            size = (rng.uniform(*spec.size_range), rng.uniform(*spec.size_range), h)
            faces = int(rng.integers(spec.faces_range[0], spec.faces_range[1] + 1))
        else:
            size = (0.5 * rng.uniform(*spec.size_range), h)
            faces = 0
        yaw = rng.uniform(*spec.yaw_range)
        r = _footprint_radius(ObjectSpec(kind, (0, 0), size))
        ok = False
        if 2 * r < min(fx, fy):
            for _attempt in range(1000):
                c = np.array([rng.uniform(-fx / 2 + r, fx / 2 - r), rng.uniform(-fy / 2 + r, fy / 2 - r)])
                if all(np.linalg.norm(c - pc) > r + pr + 0.01 for pc, pr in placed):
                    placed.append((c, r))
                    objs.append(ObjectSpec(kind, (float(c[0]), float(c[1])), tuple(float(s) for s in size),
                                           float(yaw), faces))
                    ok = True
                    break
        if not ok:
            raise SpecError("could not place all objects on the floor")
    return objs


def _box_faces(obj: ObjectSpec, cam: np.ndarray, color) -> list:
    w, d, h = obj.size
    R = _rot(obj.yaw)
    c = np.array([obj.center[0], obj.center[1], 0.0])
    ex, ey = R[:, 0], R[:, 1]
    top = _Face(c + np.array([0, 0, h]) - ex * w / 2 - ey * d / 2, ex * w, ey * d, np.array([0.0, 0.0, 1.0]), color)
    sides = []
    for sign, axis, half, span, span_len in ((1, ex, w / 2, ey, d), (-1, ex, w / 2, ey, d),
                                             (1, ey, d / 2, ex, w), (-1, ey, d / 2, ex, w)):
        n = sign * axis
        center = c + n * half + np.array([0, 0, h / 2])
        facing = float(n @ (cam - center))
        if facing > 0:
            origin = c + n * half - span * span_len / 2
            sides.append((facing, _Face(origin, span * span_len, np.array([0, 0, h]), n, color)))
    sides.sort(key=lambda t: -t[0])
    return [top] + [f for _, f in sides[: max(0, obj.faces - 1)]]


def _cylinder_faces(obj: ObjectSpec, cam: np.ndarray, facet_width: float, color) -> list:
    r, h = obj.size
    c = np.array([obj.center[0], obj.center[1], 0.0])
    faces = [_Face(c + np.array([0, 0, h]), np.zeros(3), np.zeros(3), np.array([0.0, 0.0, 1.0]), color, disc_radius=r)]
    theta_c = np.arctan2(cam[1] - c[1], cam[0] - c[0])
    n_facets = max(2, int(np.ceil(np.pi * r / facet_width)))
    edges = theta_c + np.linspace(-np.pi / 2, np.pi / 2, n_facets + 1)
    for t0, t1 in zip(edges[:-1], edges[1:]):
        p0 = c + r * np.array([np.cos(t0), np.sin(t0), 0.0])
        p1 = c + r * np.array([np.cos(t1), np.sin(t1), 0.0])
        tm = 0.5 * (t0 + t1)
        faces.append(_Face(p0, p1 - p0, np.array([0, 0, h]), np.array([np.cos(tm), np.sin(tm), 0.0]), color))
    return faces


def _sample_face(face: _Face, n: int, rng) -> np.ndarray:
    if face.disc_radius > 0:
        rad = face.disc_radius * np.sqrt(rng.uniform(size=n))
        ang = rng.uniform(0, 2 * np.pi, n)
        return face.origin + np.stack([rad * np.cos(ang), rad * np.sin(ang), np.zeros(n)], axis=1)
    uv = rng.uniform(size=(n, 2))
    return face.origin + uv[:, :1] * face.axis_u + uv[:, 1:] * face.axis_v


def _inside_footprint(xy: np.ndarray, obj: ObjectSpec) -> np.ndarray:
    rel = xy - np.asarray(obj.center)
    if obj.kind == "cylinder":
        return np.linalg.norm(rel, axis=1) <= obj.size[0]
    R = _rot(obj.yaw)[:2, :2]
    local = rel @ R
    return (np.abs(local[:, 0]) <= obj.size[0] / 2) & (np.abs(local[:, 1]) <= obj.size[1] / 2)


def gen_scene(spec: SceneSpec):
    """Sample a scene; returns (cloud with colors and normals, gt labels, gt planes).

    Label 0 is the floor; each object face follows in object order. Noise is
    Gaussian along the face normal, truncated at 4 sigma.
    """
    rng = np.random.default_rng(spec.seed)
    cam = np.asarray(spec.camera, dtype=np.float64)
    fx, fy = spec.floor_extent
    objects = list(spec.objects) if spec.objects is not None else _random_objects(spec, rng)
    for obj in objects:
        r = _footprint_radius(obj)
        if abs(obj.center[0]) + r > fx / 2 + 1e-9 or abs(obj.center[1]) + r > fy / 2 + 1e-9:
            raise SpecError("object exceeds the floor")

    floor_color = np.array([0.55, 0.55, 0.5])
    faces = []
    for obj in objects:
        color = rng.uniform(0.1, 0.9, 3)
        if obj.kind == "box":
            faces += _box_faces(obj, cam, color)
        elif obj.kind == "cylinder":
            faces += _cylinder_faces(obj, cam, spec.facet_width, color)
        else:
            raise SpecError(f"unknown object kind {obj.kind!r}")

    pts, nrm, col, lab, planes = [], [], [], [], []

    # floor, minus what the objects stand on
    floor = np.empty((0, 3))
    while len(floor) < spec.floor_points:
        cand = np.column_stack([rng.uniform(-fx / 2, fx / 2, 2 * spec.floor_points),
                                rng.uniform(-fy / 2, fy / 2, 2 * spec.floor_points),
                                np.zeros(2 * spec.floor_points)])
        keep = np.ones(len(cand), dtype=bool)
        for obj in objects:
            keep &= ~_inside_footprint(cand[:, :2], obj)
        floor = np.vstack([floor, cand[keep]])
    floor = floor[: spec.floor_points]
    up = np.array([0.0, 0.0, 1.0])
    if len(floor):
        pts.append(floor)
        nrm.append(np.tile(up, (len(floor), 1)))
        col.append(floor_color)
        lab.append(np.zeros(len(floor), dtype=np.int64))
        planes.append(Plane(up, 0.0))

    for face in faces:
        label = len(planes)
        p = _sample_face(face, spec.points_per_face, rng)
        pts.append(p)
        nrm.append(np.tile(face.normal, (len(p), 1)))
        col.append(face.color)
        lab.append(np.full(len(p), label, dtype=np.int64))
        planes.append(Plane(face.normal, -float(face.normal @ face.origin)))

    positions = np.vstack(pts) if pts else np.empty((0, 3))
    normals = np.vstack(nrm) if nrm else np.empty((0, 3))
    labels = np.concatenate(lab) if lab else np.empty(0, dtype=np.int64)
    base = np.vstack([np.tile(c, (len(p), 1)) for c, p in zip(col, pts)]) if pts else np.empty((0, 3))
    colors = np.clip(base + rng.normal(0, 0.02, base.shape), 0, 1)
    if spec.noise_sigma > 0:
        noise = np.clip(rng.normal(0, spec.noise_sigma, len(positions)), -4 * spec.noise_sigma, 4 * spec.noise_sigma)
        positions = positions + noise[:, None] * normals

    n_out = int(round(spec.outlier_fraction / (1 - spec.outlier_fraction) * len(positions)))
    if n_out:
        top = max([o.size[-1] for o in objects], default=0.0) + 0.1
        op = np.column_stack([rng.uniform(-fx / 2, fx / 2, n_out), rng.uniform(-fy / 2, fy / 2, n_out),
                              rng.uniform(0, top, n_out)])
        on = rng.normal(size=(n_out, 3))
        on /= np.linalg.norm(on, axis=1, keepdims=True)
        positions = np.vstack([positions, op])
        normals = np.vstack([normals, on])
        colors = np.vstack([colors, rng.uniform(0, 1, (n_out, 3))])
        labels = np.concatenate([labels, np.full(n_out, -1, dtype=np.int64)])

    flip = np.einsum("ij,ij->i", normals, cam - positions) < 0
    normals[flip] *= -1
    return PointCloud(positions, colors, normals), labels, planes


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation and translation (camera z forward, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ eye


def to_camera(cloud: PointCloud, R, t) -> PointCloud:
    pos = cloud.positions @ R.T + t
    normals = None if cloud.normals is None else cloud.normals @ R.T
    return PointCloud(pos, cloud.colors, normals)


def render_frame(cloud: PointCloud, intrinsics: CameraIntrinsics, width: int, height: int, labels=None):
    """Z-buffer a camera-frame cloud into depth (raw units), RGB and label images."""
    pos = cloud.positions
    front = pos[:, 2] > 1e-6
    u = np.round(intrinsics.fx * pos[:, 0] / np.where(front, pos[:, 2], 1) + intrinsics.cx).astype(np.int64)
    v = np.round(intrinsics.fy * pos[:, 1] / np.where(front, pos[:, 2], 1) + intrinsics.cy).astype(np.int64)
    ok = front & (u >= 0) & (u < width) & (v >= 0) & (v < height)
    raw = np.round(pos[:, 2] / intrinsics.depth_scale)
    ok &= (raw > 0) & (raw < 65535)
    idx = np.nonzero(ok)[0]
    # nearest point wins each pixel
    idx = idx[np.lexsort((idx, raw[idx]))]
    pix = v[idx] * width + u[idx]
    _, first = np.unique(pix, return_index=True)
    idx = idx[first]
    depth = np.zeros((height, width), dtype=np.uint16)
    rgb = np.zeros((height, width, 3), dtype=np.uint8)
    lab = np.full((height, width), -1, dtype=np.int64)
    depth[v[idx], u[idx]] = raw[idx].astype(np.uint16)
    if cloud.colors is not None:
        rgb[v[idx], u[idx]] = np.clip(np.round(cloud.colors[idx] * 255), 0, 255).astype(np.uint8)
    if labels is not None:
        lab[v[idx], u[idx]] = np.asarray(labels)[idx]
    return depth, rgb, lab


def load_rgbd_frame(depth_path, rgb_path, intrinsics_path, gt_label_path=None, normal_k: int = 30,
                    return_pixels: bool = False):
    """Read an aligned RGB-D frame; returns (cloud with normals, gt labels or None).

    Ground-truth label images follow ``io.read_label_image`` (0 = unlabeled).
    With ``return_pixels`` the (rows, cols) of kept pixels and the image shape
    are appended.
    """
    depth = io.read_depth_image(depth_path)
    rgb = io.read_rgb_image(rgb_path) if rgb_path is not None else None
    intr = io.read_intrinsics(intrinsics_path)
    if rgb is not None and rgb.shape[:2] != depth.shape:
        raise DimensionError(f"rgb {rgb.shape[:2]} and depth {depth.shape} resolutions differ")
    cloud, (rows, cols) = depth_to_cloud(depth, intr, rgb, return_pixels=True)
    cloud = estimate_normals(cloud, min(normal_k, len(cloud)))
    labels = None
    if gt_label_path is not None:
        img = io.read_label_image(gt_label_path)
        if img.shape != depth.shape:
            raise DimensionError("label image and depth resolutions differ")
        labels = img[rows, cols]
    if return_pixels:
        return cloud, labels, (rows, cols), depth.shape
    return cloud, labels


def save_scene(directory, cloud: PointCloud, labels, planes, spec: Optional[SceneSpec] = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    io.write_ply(d / "cloud.ply", cloud, binary=True)
    io.write_labels(d / "gt_labels.txt", labels)
    with open(d / "planes.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "nx", "ny", "nz", "offset"])
        for i, p in enumerate(planes):
            w.writerow([i, *(repr(float(v)) for v in p.normal), repr(float(p.offset))])
    if spec is not None:
        io.write_kv(d / "spec.txt", spec.to_kv())


def load_scene(directory):
    """Read a scene archive; returns (cloud, gt labels or None, planes)."""
    d = Path(directory)
    if not (d / "cloud.ply").exists():
        raise InputError(f"{d}: no cloud.ply")
    cloud = io.read_ply(d / "cloud.ply")
    labels = io.read_labels(d / "gt_labels.txt") if (d / "gt_labels.txt").exists() else None
    if labels is not None and len(labels) != len(cloud):
        raise InputError(f"{d}: {len(labels)} labels for {len(cloud)} points")
    planes = []
    if (d / "planes.csv").exists():
        with open(d / "planes.csv") as f:
            for row in csv.DictReader(f):
                planes.append(Plane([float(row["nx"]), float(row["ny"]), float(row["nz"])], float(row["offset"])))
    return cloud, labels, planes
