"""Flat binary parameter container.

Layout (all integers unsigned 64-bit little-endian)::

    b"DDL1" | itemsize
    repeated: name_len | name (utf-8) | rank | dims[rank] | payload

The payload is the raw little-endian float array (``itemsize`` bytes per
element, C order).
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DDL1"
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def _dtype_for(itemsize: int) -> np.dtype:
    if itemsize == 4:
        return np.dtype("<f4")
    if itemsize == 8:
        return np.dtype("<f8")
    raise CheckpointError(f"unsupported float width {itemsize}")


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    arrays = {k: np.asarray(v) for k, v in tensors.items()}
    itemsizes = {a.dtype.itemsize for a in arrays.values()} or {4}
    if len(itemsizes) != 1:
        raise CheckpointError("all tensors in a checkpoint must share one precision")
    dtype = _dtype_for(itemsizes.pop())
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U64.pack(dtype.itemsize))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        buf.write(_U64.pack(len(raw)))
        buf.write(raw)
        buf.write(_U64.pack(arr.ndim))
        for d in arr.shape:
            buf.write(_U64.pack(d))
        buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic; not a DDL1 checkpoint")
    view = memoryview(blob)
    pos = 4

    def read_u64() -> int:
        nonlocal pos
        if pos + 8 > len(blob):
            raise CheckpointError("truncated checkpoint")
        (value,) = _U64.unpack_from(view, pos)
        pos += 8
        return value

    dtype = _dtype_for(read_u64())
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        n = read_u64()
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        rank = read_u64()
        shape = tuple(read_u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dtype.itemsize
        if pos + nbytes > len(blob):
            raise CheckpointError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
        pos += nbytes
    return out


def save(path, tensors: dict[str, np.ndarray]) -> str:
    """Write a checkpoint and return its sha256 (used as checkpoint id)."""
    blob = dumps(tensors)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def digest(tensors: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(dumps(tensors)).hexdigest()
