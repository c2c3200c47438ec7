"""NDT1 binary tensor format.

Layout: magic ``b"NDT1"``, one byte dtype code (0 float64, 1 float32), one
byte rank, ``rank`` little-endian uint64 dims, then the row-major payload in
little-endian byte order.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

MAGIC = b"NDT1"
_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_TO_CODE = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class FormatError(ValueError):
    """Malformed or truncated NDT1 data."""


def dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _DTYPE_TO_CODE.get(arr.dtype.newbyteorder("=")) if arr.dtype.kind == "f" else None
    if code is None:
        raise TypeError(f"NDT1 stores float64 or float32, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank too large for NDT1")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def read_from(stream) -> np.ndarray:
    """Read one tensor from a binary stream positioned at its magic bytes."""
    head = stream.read(6)
    if len(head) < 6 or head[:4] != MAGIC:
        raise FormatError("missing NDT1 magic")
    code, rank = head[4], head[5]
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}")
    raw_dims = stream.read(8 * rank)
    if len(raw_dims) != 8 * rank:
        raise FormatError("truncated NDT1 header")
    dims = struct.unpack(f"<{rank}Q", raw_dims)
    dtype = _CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = stream.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError("truncated NDT1 payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def loads(data: bytes) -> np.ndarray:
    stream = io.BytesIO(data)
    arr = read_from(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after NDT1 tensor")
    return arr


def save(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arr))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
