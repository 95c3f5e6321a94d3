"""Bit-exact named-tensor checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes  b"FEIR"
    version    u32      1
    count      u32      number of tensors
    per tensor:
        name_len  u32
        name      UTF-8 bytes
        dtype     u8   (0 = float32 little-endian)
        rank      u8
        extents   rank x u32
        data      row-major payload
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"FEIR"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class UnknownDtypeError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def encode_checkpoint(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        if arr.dtype != np.float32:
            raise TypeError(f"tensor {name!r} has dtype {arr.dtype}; only float32 is storable")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(raw: bytes) -> dict:
    r = _Reader(raw)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic bytes {magic!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"name length of tensor {i}")
        name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        code, rank = r.unpack("<BB", f"header of {name!r}")
        if code not in DTYPES:
            raise UnknownDtypeError(f"unknown dtype code {code} for {name!r}")
        dims = r.unpack(f"<{rank}I", f"extents of {name!r}")
        dtype = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(size * dtype.itemsize, f"data of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).astype(np.float32).reshape(dims)
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after the last tensor")
    return tensors


def save_checkpoint(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(tensors))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
