"""Shared binary container: little-endian, 4-byte magic, 1-byte version.

Every on-disk artifact (checkpoints, codebooks, token tables, sequence
sets) is a magic+version header followed by a count of named arrays.
Arrays are stored C-contiguous with explicit little-endian dtypes, and
names are written in sorted order, so identical contents produce
byte-identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC_CHECKPOINT = b"GTCP"
MAGIC_CODEBOOKS = b"GTCB"
MAGIC_TOKENS = b"GTTK"
MAGIC_SEQUENCES = b"GTSQ"
VERSION = 1

# numpy kinds we persist; everything little-endian on disk.
_DTYPES = {"<f4", "<f8", "<i4", "<i8", "<u4", "<u8", "|b1"}


class FormatError(ValueError):
    """Raised for wrong magic, unsupported version, or truncated data."""


def _le(dtype: np.dtype) -> str:
    code = ("|" if dtype.itemsize == 1 else "<") + dtype.kind + str(dtype.itemsize)
    if code not in _DTYPES:
        raise FormatError(f"unsupported array dtype {dtype}")
    return code


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def write_header(f, magic: bytes) -> None:
    f.write(magic)
    f.write(struct.pack("<B", VERSION))


def read_header(f, magic: bytes) -> int:
    got = _read_exact(f, 4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<B", _read_exact(f, 1))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    return version


def write_array(f, arr: np.ndarray) -> None:
    code = _le(arr.dtype)
    f.write(struct.pack("<B", len(code)))
    f.write(code.encode("ascii"))
    f.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<Q", dim))
    f.write(np.ascontiguousarray(arr, dtype=np.dtype(code)).tobytes())


def read_array(f) -> np.ndarray:
    (codelen,) = struct.unpack("<B", _read_exact(f, 1))
    code = _read_exact(f, codelen).decode("ascii")
    if code not in _DTYPES:
        raise FormatError(f"unsupported dtype code {code!r}")
    (ndim,) = struct.unpack("<B", _read_exact(f, 1))
    shape = tuple(struct.unpack("<Q", _read_exact(f, 8))[0] for _ in range(ndim))
    dtype = np.dtype(code)
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = _read_exact(f, count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_named_arrays(path, magic: bytes, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        write_header(f, magic)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            write_array(f, np.asarray(arrays[name]))


def load_named_arrays(path, magic: bytes) -> dict[str, np.ndarray]:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        read_header(f, magic)
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(count):
            (namelen,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, namelen).decode("utf-8")
            arrays[name] = read_array(f)
        if f.read(1):
            raise FormatError("trailing bytes after last array")
    return arrays
