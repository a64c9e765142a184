"""Low-level helpers for the package's binary file formats.

All formats are little-endian with an 8-byte ASCII magic and a u32
version. Readers must consume exactly the declared payload; trailing or
missing bytes are format errors.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError


def write_magic(fh: BinaryIO, magic: bytes, version: int) -> None:
    assert len(magic) == 8
    fh.write(magic)
    fh.write(struct.pack("<I", version))


def read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what} "
                          f"(wanted {n} bytes, got {len(buf)})")
    return buf


def check_magic(fh: BinaryIO, magic: bytes, version: int, what: str) -> None:
    got = read_exact(fh, 8, f"{what} magic")
    if got != magic:
        raise FormatError(f"bad magic for {what}: expected {magic!r}, got {got!r}")
    (ver,) = struct.unpack("<I", read_exact(fh, 4, f"{what} version"))
    if ver != version:
        raise FormatError(f"unsupported {what} version {ver} (expected {version})")


def read_u64(fh: BinaryIO, what: str) -> int:
    (v,) = struct.unpack("<Q", read_exact(fh, 8, what))
    return v


def read_u32(fh: BinaryIO, what: str) -> int:
    (v,) = struct.unpack("<I", read_exact(fh, 4, what))
    return v


def read_u8(fh: BinaryIO, what: str) -> int:
    (v,) = struct.unpack("<B", read_exact(fh, 1, what))
    return v


def read_f32_array(fh: BinaryIO, count: int, what: str) -> np.ndarray:
    buf = read_exact(fh, 4 * count, what)
    return np.frombuffer(buf, dtype="<f4").copy()


def write_f32_array(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def expect_eof(fh: BinaryIO, what: str) -> None:
    if fh.read(1):
        raise FormatError(f"trailing bytes after {what} payload")
