"""Flat binary tensor format.

Layout (all little-endian)::

    bytes 0-3    magic b"MSFT"
    bytes 4-7    u32 format version (1)
    bytes 8-11   u32 dtype code (1 = float32, 2 = float64)
    bytes 12-15  u32 reserved, zero
    bytes 16-47  four u64 dimensions N, C, H, W
    bytes 48-    raw payload in row-major (N, C, H, W) order
"""

from __future__ import annotations

import struct

import numpy as np

from masf.errors import DataError
from masf.tensor.core import Tensor

MAGIC = b"MSFT"
VERSION = 1
HEADER = struct.Struct("<4sIII4Q")
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def encode(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = CODES[arr.dtype]
    return HEADER.pack(MAGIC, VERSION, code, 0, *arr.shape) + arr.astype(DTYPES[code]).tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one record at ``offset``; returns the tensor and the offset past it."""
    if len(buf) - offset < HEADER.size:
        raise DataError("truncated tensor header")
    magic, version, code, _, *dims = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise DataError(f"bad tensor magic {magic!r}")
    if version != VERSION or code not in DTYPES:
        raise DataError(f"unsupported tensor version {version} / dtype code {code}")
    dt = DTYPES[code]
    count = int(np.prod(dims))
    start = offset + HEADER.size
    end = start + count * dt.itemsize
    if end > len(buf):
        raise DataError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=start).reshape(dims)
    return Tensor(arr.astype(dt.newbyteorder("=")).copy()), end


def save(path, t: Tensor):
    with open(path, "wb") as fh:
        fh.write(encode(t))


def load(path) -> Tensor:
    with open(path, "rb") as fh:
        return decode(fh.read())[0]
