"""Versioned binary checkpoints.

Layout (little endian)::

    b"PKNN"  u32 version
    u32 meta_len, meta_len bytes of UTF-8 JSON
    u32 n_entries
    per entry: u16 name_len, name, u8 ndim, ndim x u32 dims, prod(dims) x f64
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..exceptions import DataError
from .layers import Parameter

MAGIC = b"PKNN"
VERSION = 1


def save_checkpoint(path, params: dict[str, Parameter] | dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(params))]
    for name in sorted(params):
        value = params[name]
        arr = np.asarray(value.data if isinstance(value, Parameter) else value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        (meta_len,) = struct.unpack_from("<I", data, 8)
        pos = 12
        meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
            pos += 8 * n
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    return arrays, meta


def assign_parameters(params: dict[str, Parameter], arrays: dict[str, np.ndarray]) -> None:
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise DataError(f"checkpoint lacks parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise DataError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.data.shape}")
        p.data[...] = arrays[name]
