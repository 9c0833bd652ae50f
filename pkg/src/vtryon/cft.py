"""CFT tensor container: a tiny binary format for float32 arrays.

Layout, all little-endian:
    magic  "CFT1"          4 bytes
    rank   uint32
    dims   rank x uint32
    data   float32, row-major, 4 * product(dims) bytes
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"CFT1"
MAX_ELEMENTS = 1 << 32  # refuse absurd headers before allocating


class CftError(ValueError):
    pass


class BadMagicError(CftError):
    pass


class TruncatedError(CftError):
    pass


class DimOverflowError(CftError):
    pass


def write_tensor(path, array) -> None:
    # note: ascontiguousarray would promote rank-0 arrays to rank 1
    arr = np.asarray(array, dtype=np.float32)
    dims = arr.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(dims)))
        for d in dims:
            fh.write(struct.pack("<I", d))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise TruncatedError(f"{path}: file shorter than header")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    header = 8 + 4 * rank
    if len(blob) < header:
        raise TruncatedError(f"{path}: truncated dim table")
    dims = struct.unpack_from(f"<{rank}I", blob, 8) if rank else ()
    count = 1
    for d in dims:
        count *= d
    if count > MAX_ELEMENTS:
        raise DimOverflowError(f"{path}: {count} elements exceeds limit")
    payload = blob[header:]
    if len(payload) != 4 * count:
        raise TruncatedError(
            f"{path}: payload {len(payload)} bytes, expected {4 * count}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
