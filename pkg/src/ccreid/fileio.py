"""Binary file formats: tensors, and the primitives other formats reuse.

All multi-byte integers are little-endian.  A tensor block is:

    magic "CTNS" | version u8 (=1) | rank u8 | rank x u32 dims |
    product(dims) x f32 values, row-major

Checkpoint and dataset files embed these blocks; they share the header
conventions and the error kinds defined here.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .autodiff import Tensor

TENSOR_MAGIC = b"CTNS"
TENSOR_VERSION = 1
_MAX_RANK = 16


class FileFormatError(Exception):
    """Base for malformed binary files."""


class BadMagicError(FileFormatError):
    pass


class BadVersionError(FileFormatError):
    pass


class TruncatedPayloadError(FileFormatError):
    pass


class MissingTensorError(FileFormatError):
    pass


def read_exact(fp: BinaryIO, n: int, what: str = "payload") -> bytes:
    """Read exactly ``n`` bytes or fail, naming the byte offset reached."""
    buf = fp.read(n)
    if len(buf) != n:
        offset = fp.tell() - len(buf)
        raise TruncatedPayloadError(
            f"truncated {what} at byte offset {offset}: wanted {n} bytes, got {len(buf)}")
    return buf


def write_u8(fp: BinaryIO, v: int) -> None:
    fp.write(struct.pack("<B", v))


def write_u16(fp: BinaryIO, v: int) -> None:
    fp.write(struct.pack("<H", v))


def write_u32(fp: BinaryIO, v: int) -> None:
    fp.write(struct.pack("<I", v))


def read_u8(fp: BinaryIO, what: str = "u8") -> int:
    return struct.unpack("<B", read_exact(fp, 1, what))[0]


def read_u16(fp: BinaryIO, what: str = "u16") -> int:
    return struct.unpack("<H", read_exact(fp, 2, what))[0]


def read_u32(fp: BinaryIO, what: str = "u32") -> int:
    return struct.unpack("<I", read_exact(fp, 4, what))[0]


def expect_magic(fp: BinaryIO, magic: bytes, what: str) -> None:
    got = read_exact(fp, len(magic), f"{what} magic")
    if got != magic:
        raise BadMagicError(f"bad {what} magic: expected {magic!r}, got {got!r}")


def write_tensor_block(fp: BinaryIO, array: np.ndarray) -> None:
    """Write one CTNS block; values are stored as float32."""
    arr = np.ascontiguousarray(array)
    if arr.ndim > _MAX_RANK:
        raise ValueError(f"tensor rank {arr.ndim} exceeds format limit {_MAX_RANK}")
    fp.write(TENSOR_MAGIC)
    write_u8(fp, TENSOR_VERSION)
    write_u8(fp, arr.ndim)
    for dim in arr.shape:
        write_u32(fp, dim)
    fp.write(arr.astype("<f4").tobytes())


def read_tensor_block(fp: BinaryIO) -> np.ndarray:
    """Read one CTNS block back as a float32 array."""
    expect_magic(fp, TENSOR_MAGIC, "tensor")
    version = read_u8(fp, "tensor version")
    if version != TENSOR_VERSION:
        raise BadVersionError(f"unknown tensor format version {version}")
    rank = read_u8(fp, "tensor rank")
    if rank > _MAX_RANK:
        raise FileFormatError(f"tensor rank {rank} exceeds format limit {_MAX_RANK}")
    shape = tuple(read_u32(fp, "tensor dim") for _ in range(rank))
    count = 1
    for dim in shape:
        count *= dim
    raw = read_exact(fp, 4 * count, "tensor values")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def write_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fp:
        write_tensor_block(fp, t.data)


def read_tensor(path, dtype=None) -> Tensor:
    with open(path, "rb") as fp:
        arr = read_tensor_block(fp)
    return Tensor(arr, dtype=dtype if dtype is not None else np.float32)
