"""Binary model files.

Layout (all integers little-endian u32)::

    b"MORN" | version | meta_len | meta (UTF-8 JSON)
    | n_tensors | n_tensors x (name_len, name, ndim, dims...)
    | float32 LE blob: parameters in table order, then running statistics
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import ModelFormatError
from .net import VotingNet

MAGIC = b"MORN"
VERSION = 1


def save_net(net: VotingNet, path) -> None:
    meta = {
        "hidden": list(net.hidden),
        "backbone_act": net.backbone_act,
        "head_act": net.head_act,
        "bn_eps": net.bn_eps,
        "bn_momentum": net.bn_momentum,
        "epochs_trained": net.epochs_trained,
    }
    tensors = [("param:" + k, v) for k, v in net.params.items()]
    tensors += [("buffer:" + k, v) for k, v in net.buffers.items()]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(meta_bytes)) + meta_bytes
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    for _, arr in tensors:
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_net(path) -> VotingNet:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {data[:4]!r}")
    try:
        pos = 4
        version, meta_len = struct.unpack_from("<II", data, pos)
        if version != VERSION:
            raise ModelFormatError(f"{path}: unsupported model version {version}")
        pos += 8
        meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        table = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            table.append((name, shape))
        net = VotingNet(
            tuple(meta["hidden"]), meta["backbone_act"], meta["head_act"],
            meta["bn_eps"], meta["bn_momentum"], epochs_trained=meta.get("epochs_trained", 0),
        )
        for name, shape in table:
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(data):
                raise ModelFormatError(f"{path}: truncated parameter blob")
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 4 * size
            kind, key = name.split(":", 1)
            (net.params if kind == "param" else net.buffers)[key] = arr
    except ModelFormatError:
        raise
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as e:
        raise ModelFormatError(f"{path}: corrupt model file ({e})") from None
    if pos != len(data):
        raise ModelFormatError(f"{path}: {len(data) - pos} trailing bytes")
    expected = VotingNet.create(net.hidden)
    for k, v in expected.params.items():
        if k not in net.params or net.params[k].shape != v.shape:
            raise ModelFormatError(f"{path}: missing or misshapen tensor {k}")
    return net
