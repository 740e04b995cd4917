"""FGRID: a tiny binary container for 2D/3D float32 grids.

Layout (little endian)::

    b"FGRD" | version u8 (=1) | ndim u8 (2 or 3) | ndim x u32 dims | f32 values

Values are row-major, slowest axis first.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FGRD"
VERSION = 1


class FGridError(ValueError):
    pass


def encode(grid) -> bytes:
    arr = np.asarray(grid)
    if arr.ndim not in (2, 3):
        raise FGridError(f"FGRID stores 2D or 3D grids, got ndim={arr.ndim}")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one grid starting at ``offset``; returns (grid, next offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise FGridError("bad FGRID magic")
    if len(buf) < offset + 6:
        raise FGridError("truncated FGRID header")
    version, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if version != VERSION:
        raise FGridError(f"unsupported FGRID version {version}")
    if ndim not in (2, 3):
        raise FGridError(f"bad FGRID ndim {ndim}")
    pos = offset + 6
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = int(np.prod(dims))
    end = pos + 4 * count
    if len(buf) < end:
        raise FGridError("truncated FGRID payload")
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    return values.astype(np.float32), end


def write(path, grid) -> None:
    Path(path).write_bytes(encode(grid))


def read(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    grid, end = decode(buf)
    if end != len(buf):
        raise FGridError(f"trailing bytes in {path}")
    return grid
