"""Minimal named-tensor container for golden fixtures.

Layout (all little-endian): magic b"PLT1", u32 tensor count, then per tensor
a u16 name length, the UTF-8 name, a u8 rank, rank u64 dims, and the raw
float64 data in C order.  No compression, no alignment games; the point is a
stable byte-exact format for checked-in reference values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PLT1"


class ContainerError(ValueError):
    pass


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        enc = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f8")
        blob += struct.pack("<H", len(enc))
        blob += enc
        blob += struct.pack("<B", a.ndim)
        blob += struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b""
        blob += a.tobytes(order="C")
    Path(path).write_bytes(bytes(blob))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {data[:4]!r}")
    off = 4
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}Q", data, off) if rank else ()
        off += 8 * rank
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        out[name] = arr.copy()  # detach from the mmap-like buffer
    if off != len(data):
        raise ContainerError(f"{path}: {len(data) - off} trailing bytes")
    return out
