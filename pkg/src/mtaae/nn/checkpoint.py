"""Binary parameter checkpoints.

Layout (little-endian)::

    b"MTAE"  u32 version
    u32 meta_len, meta_len bytes of UTF-8 JSON (architecture, vocabularies, ...)
    u32 n_groups
    n_groups x { u32 name_len, name (UTF-8), u32 rank, rank x u64 dims, f32 payload }

Parameters are stored as float32 whatever the in-memory precision.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MTAE"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(groups: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(groups)))
    for name, arr in groups.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not an MTAE checkpoint (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = take("<I")
    meta = json.loads(bytes(view[pos:pos + meta_len]).decode("utf-8"))
    pos += meta_len
    (count,) = take("<I")
    groups: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        if pos + 4 * n > len(view):
            raise CheckpointError(f"truncated payload for {name!r}")
        groups[name] = np.frombuffer(view, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
        pos += 4 * n
    return groups, meta


def save(path, groups: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(groups, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
