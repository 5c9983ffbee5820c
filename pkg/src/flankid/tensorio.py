"""Named-tensor binary container shared by network weights and fitted models.

Byte layout (all integers little-endian)::

    magic      4 bytes   b"NTC1"
    count      uint32    number of tensors
    repeated count times:
        name_len   uint32
        name       name_len bytes, UTF-8
        dtype      1 byte, b"f" (float32) or b"d" (float64)
        ndim       uint32
        dims       ndim x uint32
        data       prod(dims) values, row-major, little-endian

Tensors are written in sorted name order so identical contents give
identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"NTC1"
_DTYPES = {b"f": np.dtype("<f4"), b"d": np.dtype("<f8")}


class ContainerError(ValueError):
    """Raised for truncated or malformed tensor containers."""


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], dtype: str = "float32") -> None:
    if dtype not in ("float32", "float64"):
        raise ValueError(f"unsupported dtype {dtype!r}")
    code = b"f" if dtype == "float32" else b"d"
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=_DTYPES[code], order="C")
        raw_name = name.encode("utf-8")
        out += struct.pack("<I", len(raw_name)) + raw_name + code
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic bytes")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ContainerError(f"{path}: truncated container")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        code = take(1)
        if code not in _DTYPES:
            raise ContainerError(f"{path}: unknown dtype code {code!r} for {name}")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = data.astype(dt.newbyteorder("="), copy=True)
    if pos != len(buf):
        raise ContainerError(f"{path}: trailing bytes after last tensor")
    return tensors
