"""File formats: PLY clouds, key-value text files, label lists and images."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError, InputError
from .geom import CameraIntrinsics, PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, cloud: PointCloud, binary: bool = True, colors_u8=None) -> None:
    """Write x/y/z float32, optional red/green/blue uchar and nx/ny/nz float32.

    ``colors_u8`` overrides the cloud colors (used for label visualisations).
    """
    n = len(cloud)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors_u8 is None and cloud.colors is not None:
        colors_u8 = np.clip(np.round(cloud.colors * 255), 0, 255).astype(np.uint8)
    if colors_u8 is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if cloud.normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    data = np.empty(n, dtype=fields)
    for i, c in enumerate("xyz"):
        data[c] = cloud.positions[:, i]
    if colors_u8 is not None:
        for i, c in enumerate(("red", "green", "blue")):
            data[c] = colors_u8[:, i]
    if cloud.normals is not None:
        for i, c in enumerate(("nx", "ny", "nz")):
            data[c] = cloud.normals[:, i]

    names = {"<f4": "float", "u1": "uchar"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}"]
    header += [f"property {names[t]} {name}" for name, t in fields]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(data.tobytes())
        else:
            for row in data:
                f.write((" ".join(_fmt(v) for v in row) + "\n").encode("ascii"))


def _fmt(v) -> str:
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    return str(int(v))


def read_ply(path) -> PointCloud:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise InputError(f"{path}: not a PLY file")
        fmt, n, props, in_vertex = None, 0, [], False
        while True:
            line = f.readline()
            if not line:
                raise InputError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n = int(tok[2])
                elif n == 0:
                    raise InputError(f"{path}: only vertex-first PLY files are supported")
            elif tok[0] == "property" and in_vertex:
                if tok[1] == "list":
                    raise InputError(f"{path}: list properties on vertices are not supported")
                props.append((tok[2], _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        if fmt == "ascii":
            rows = [f.readline().split() for _ in range(n)]
            arr = np.array(rows, dtype=np.float64).reshape(n, len(props))
            data = {name: arr[:, i] for i, (name, _) in enumerate(props)}
        elif fmt in ("binary_little_endian", "binary_big_endian"):
            end = "<" if fmt == "binary_little_endian" else ">"
            dtype = np.dtype([(name, end + t) for name, t in props])
            raw = np.frombuffer(f.read(dtype.itemsize * n), dtype=dtype, count=n)
            data = {name: raw[name].astype(np.float64) for name, _ in props}
        else:
            raise InputError(f"{path}: unknown PLY format {fmt!r}")

    pos = np.stack([data["x"], data["y"], data["z"]], axis=1)
    colors = normals = None
    if all(c in data for c in ("red", "green", "blue")):
        colors = np.stack([data["red"], data["green"], data["blue"]], axis=1) / 255.0
    if all(c in data for c in ("nx", "ny", "nz")):
        normals = np.stack([data["nx"], data["ny"], data["nz"]], axis=1)
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / np.where(norm > 0, norm, 1.0)
        if np.any(norm == 0):
            normals = None
    return PointCloud(pos, colors, normals)


def read_kv(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_kv(path, values: dict) -> None:
    with open(path, "w") as f:
        for k, v in values.items():
            f.write(f"{k} = {v}\n")


def read_intrinsics(path) -> CameraIntrinsics:
    kv = read_kv(path)
    try:
        return CameraIntrinsics(
            float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]),
            float(kv.get("depth_scale", 0.001)),
        )
    except KeyError as e:
        raise InputError(f"{path}: missing intrinsics key {e}") from None


def write_intrinsics(path, k: CameraIntrinsics) -> None:
    write_kv(path, {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "depth_scale": k.depth_scale})


def write_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    with open(path, "w") as f:
        f.write("".join(f"{int(v)}\n" for v in labels))


def read_labels(path) -> np.ndarray:
    text = Path(path).read_text().split()
    return np.array([int(t) for t in text], dtype=np.int64)


def read_depth_image(path) -> np.ndarray:
    if not os.path.exists(path):
        raise InputError(f"{path}: no such file")
    try:
        img = Image.open(path)
        arr = np.array(img)
    except OSError as e:
        raise InputError(f"{path}: unreadable image ({e})") from None
    if arr.ndim != 2:
        raise DimensionError(f"{path}: depth must be single-channel")
    return arr.astype(np.uint16)


def write_depth_image(path, depth) -> None:
    Image.fromarray(np.asarray(depth, dtype=np.uint16)).save(path)


def read_rgb_image(path) -> np.ndarray:
    if not os.path.exists(path):
        raise InputError(f"{path}: no such file")
    try:
        return np.array(Image.open(path).convert("RGB"))
    except OSError as e:
        raise InputError(f"{path}: unreadable image ({e})") from None


def write_rgb_image(path, rgb) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path)


def read_label_image(path) -> np.ndarray:
    """Per-pixel labels stored as 16-bit PNG; 0 is unlabeled, v > 0 is label v-1."""
    return read_depth_image(path).astype(np.int64) - 1


def write_label_image(path, labels) -> None:
    write_depth_image(path, np.asarray(labels, dtype=np.int64) + 1)
