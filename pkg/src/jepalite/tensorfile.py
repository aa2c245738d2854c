"""Minimal named-tensor container: magic "JTNS", u32 version, u32 entry
count, then per entry a u32-length-prefixed UTF-8 name, u32 dtype tag
(f32=1, f64=2), u32 rank, u64 dims, and raw little-endian data.

Entries keep insertion order, so write -> read -> write round-trips to
byte-identical files.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"JTNS"
VERSION = 1

_DTYPE_TO_TAG = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class TensorFileError(Exception):
    """Malformed, truncated, or version-incompatible tensor file."""


def write_tensors(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays to ``path`` (atomically, via a temp file)."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_TO_TAG:
            raise TensorFileError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<II", _DTYPE_TO_TAG[dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TensorFileError(
                f"truncated file: wanted {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read a tensor container written by :func:`write_tensors`."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise TensorFileError(f"{path}: bad magic, not a tensor container")
    version = r.u32()
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported version {version} (want {VERSION})")
    count = r.u32()
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        if name in out:
            raise TensorFileError(f"{path}: duplicate tensor name {name!r}")
        tag = r.u32()
        if tag not in _TAG_TO_DTYPE:
            raise TensorFileError(f"{path}: unknown dtype tag {tag} for {name!r}")
        dtype = _TAG_TO_DTYPE[tag]
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(n_bytes), dtype=dtype).reshape(dims).copy()
        out[name] = arr
    if r.pos != len(r.data):
        raise TensorFileError(f"{path}: {len(r.data) - r.pos} trailing bytes after last entry")
    return out
