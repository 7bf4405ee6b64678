"""Versioned binary checkpoints.

Layout::

    b"EEGCNN\\0\\0" | u32 version | u32 header length | header (UTF-8 JSON)
    | tensor blobs in header order, little-endian float32

The header holds the architecture descriptor (grid, filters, FC sizes, dropout,
l2), the seed, the input normalizer statistics, the training majority class and
the name/shape/kind of every tensor.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..ssfi import Normalizer
from .model import FILTERS, IN_CHANNELS, N_CLASSES, CnnModel

MAGIC = b"EEGCNN\0\0"
VERSION = 1


def checkpoint_bytes(model: CnnModel, extra: dict | None = None) -> bytes:
    tensors = [(k, "param", v) for k, v in model.params.items()]
    tensors += [(k, "buffer", v) for k, v in model.buffers.items()]
    header = {
        "arch": {
            "grid": model.grid, "in_channels": IN_CHANNELS, "filters": list(FILTERS),
            "fc_sizes": list(model.fc_sizes), "n_classes": N_CLASSES,
            "dropout": model.dropout, "l2": model.l2,
        },
        "seed": model.seed,
        "normalizer": model.normalizer.to_dict() if model.normalizer is not None else None,
        "majority": model.majority,
        "tensors": [{"name": k, "kind": kind, "shape": list(v.shape)} for k, kind, v in tensors],
        "extra": extra or {},
    }
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(raw)), raw]
    parts += [np.ascontiguousarray(v, dtype="<f4").tobytes() for _, _, v in tensors]
    return b"".join(parts)


def save_checkpoint(model: CnnModel, path: str | os.PathLike, extra: dict | None = None) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_bytes(checkpoint_bytes(model, extra))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> CnnModel:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    arch = header["arch"]
    if tuple(arch["filters"]) != FILTERS or arch["in_channels"] != IN_CHANNELS:
        raise ValueError(f"{path}: architecture does not match this build")
    off = 16 + hlen
    params, buffers = {}, {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(t["shape"])
        off += 4 * count
        (params if t["kind"] == "param" else buffers)[t["name"]] = arr.astype(np.float32)
    norm = Normalizer.from_dict(header["normalizer"]) if header["normalizer"] else None
    return CnnModel(
        grid=arch["grid"], fc_sizes=tuple(arch["fc_sizes"]), seed=header["seed"],
        dtype=np.float32, dropout=arch["dropout"], l2=arch["l2"],
        params=params, buffers=buffers, normalizer=norm, majority=header["majority"],
    )
