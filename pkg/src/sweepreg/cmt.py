"""Flat binary tensor container used for volumes, frames, and checkpoints.

Layout (little-endian throughout):
    magic   4 bytes  b"CMT1"
    dtype   u8       1 = float32
    ndim    u8
    extents ndim * u64
    data    raw row-major values
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"CMT1"
_DTYPE_CODES = {1: np.dtype("<f4")}
_CODE_FOR_DTYPE = {np.dtype("float32"): 1}


class CmtError(Exception):
    """Raised on malformed container bytes or unsupported dtypes."""


def write_cmt(path: str | os.PathLike, array: np.ndarray) -> None:
    # not ascontiguousarray: that would silently promote 0-d scalars to 1-d
    arr = np.asarray(array, dtype="<f4")
    code = _CODE_FOR_DTYPE[np.dtype("float32")]
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_cmt(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    return from_bytes(raw)


def from_bytes(raw: bytes) -> np.ndarray:
    if len(raw) < 6:
        raise CmtError("truncated container: missing header")
    if raw[:4] != MAGIC:
        raise CmtError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    code, ndim = struct.unpack_from("<BB", raw, 4)
    if code not in _DTYPE_CODES:
        raise CmtError(f"unknown dtype code {code}")
    dt = _DTYPE_CODES[code]
    header_end = 6 + 8 * ndim
    if len(raw) < header_end:
        raise CmtError("truncated container: missing extents")
    extents = struct.unpack_from(f"<{ndim}Q", raw, 6)
    count = int(np.prod(extents)) if ndim else 1
    expected = header_end + count * dt.itemsize
    if len(raw) != expected:
        raise CmtError(f"payload size {len(raw) - header_end} does not match "
                       f"extents {extents} ({count} values expected)")
    data = np.frombuffer(raw, dtype=dt, count=count, offset=header_end)
    return data.reshape(extents).copy()
