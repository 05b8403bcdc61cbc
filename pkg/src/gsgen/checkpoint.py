"""Single-file binary checkpoints.

Layout (little-endian): 8-byte magic, uint32 version, uint32 section count,
then one table row per section (32-byte name, uint8 kind, uint8 ndim,
2 pad bytes, 4 x uint32 shape, uint64 offset, uint64 byte length) followed by
the section payloads in table order. Kinds: 0 float32, 1 int64, 2 utf-8 text.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GSGENCKP"
VERSION = 1
_ROW = struct.Struct("<32sBB2x4IQQ")
_KINDS = {0: "<f4", 1: "<i8"}


class CheckpointError(ValueError):
    pass


def _encode(value):
    if isinstance(value, str):
        return 2, (), value.encode("utf-8")
    arr = np.asarray(value)
    if arr.dtype.kind == "f":
        kind = 0
    elif arr.dtype.kind in "iub":
        kind = 1
    else:
        raise CheckpointError(f"unsupported section dtype {arr.dtype}")
    if arr.ndim > 4:
        raise CheckpointError("sections are limited to 4 dimensions")
    return kind, arr.shape, np.ascontiguousarray(arr, dtype=_KINDS[kind]).tobytes()


def dump_sections(sections: dict) -> bytes:
    names = list(sections)
    encoded = [_encode(sections[n]) for n in names]
    offset = 16 + _ROW.size * len(names)
    table, payload = [], []
    for name, (kind, shape, data) in zip(names, encoded):
        raw = name.encode("utf-8")
        if len(raw) > 32:
            raise CheckpointError(f"section name too long: {name}")
        dims = list(shape) + [0] * (4 - len(shape))
        table.append(_ROW.pack(raw, kind, len(shape), *dims, offset, len(data)))
        payload.append(data)
        offset += len(data)
    return MAGIC + struct.pack("<II", VERSION, len(names)) + b"".join(table) + b"".join(payload)


def load_sections(data: bytes) -> dict:
    if data[:8] != MAGIC:
        raise CheckpointError("not a gsgen checkpoint")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for k in range(count):
        raw, kind, ndim, d0, d1, d2, d3, off, length = _ROW.unpack_from(data, 16 + k * _ROW.size)
        name = raw.rstrip(b"\0").decode("utf-8")
        chunk = data[off:off + length]
        if kind == 2:
            out[name] = chunk.decode("utf-8")
        else:
            out[name] = np.frombuffer(chunk, dtype=_KINDS[kind]).reshape((d0, d1, d2, d3)[:ndim]).copy()
    return out


def save(path, sections: dict):
    """Write atomically so an aborted run never leaves a truncated checkpoint."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dump_sections(sections))
    os.replace(tmp, path)


def load(path) -> dict:
    return load_sections(Path(path).read_bytes())
