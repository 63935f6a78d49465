"""Binary container for on-disk artifacts.

Every artifact file starts with the magic bytes ``MMLC``, a version byte,
and a kind byte; payloads are little-endian with row-major (C order)
array data. Domain modules build their own records out of the primitives
here; the generic ARRAY kind covers plain tensors.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import ParseError

MAGIC = b"MMLC"
VERSION = 1

KIND_ARRAY = 1
KIND_MEASUREMENT = 2
KIND_DENSITY = 3
KIND_RENDER = 4
KIND_CHECKPOINT = 5
KIND_RSRP = 6

_DTYPE_CODES = {0: np.float64, 1: np.uint32, 2: np.complex128}
_DTYPE_TAGS = {np.dtype(np.float64): 0, np.dtype(np.uint32): 1, np.dtype(np.complex128): 2}


def write_header(stream, kind: int) -> None:
    stream.write(MAGIC)
    stream.write(struct.pack("<BB", VERSION, kind))


def read_header(stream, expect_kind: int | None = None) -> int:
    magic = stream.read(4)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, kind = struct.unpack("<BB", _read_exact(stream, 2))
    if version != VERSION:
        raise ParseError(f"unsupported container version {version}")
    if expect_kind is not None and kind != expect_kind:
        raise ParseError(f"container kind {kind}, expected {expect_kind}")
    return kind


def _read_exact(stream, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise ParseError(f"truncated container: wanted {n} bytes, got {len(data)}")
    return data


def write_u8(stream, value: int) -> None:
    stream.write(struct.pack("<B", value))


def write_u32(stream, value: int) -> None:
    stream.write(struct.pack("<I", value))


def write_i32(stream, value: int) -> None:
    stream.write(struct.pack("<i", value))


def write_u64(stream, value: int) -> None:
    stream.write(struct.pack("<Q", value))


def write_f64(stream, value: float) -> None:
    stream.write(struct.pack("<d", value))


def read_u8(stream) -> int:
    return struct.unpack("<B", _read_exact(stream, 1))[0]


def read_u32(stream) -> int:
    return struct.unpack("<I", _read_exact(stream, 4))[0]


def read_i32(stream) -> int:
    return struct.unpack("<i", _read_exact(stream, 4))[0]


def read_u64(stream) -> int:
    return struct.unpack("<Q", _read_exact(stream, 8))[0]


def read_f64(stream) -> float:
    return struct.unpack("<d", _read_exact(stream, 8))[0]


def write_array(stream, arr: np.ndarray) -> None:
    """Write dtype tag, ndim, dims, and C-order payload."""
    arr = np.ascontiguousarray(arr)
    tag = _DTYPE_TAGS.get(arr.dtype)
    if tag is None:
        raise ValueError(f"unsupported array dtype {arr.dtype}")
    write_u8(stream, tag)
    write_u8(stream, arr.ndim)
    for d in arr.shape:
        write_u32(stream, d)
    data = arr.tobytes(order="C")
    if not np.little_endian:
        data = arr.byteswap().tobytes(order="C")
    stream.write(data)


def read_array(stream) -> np.ndarray:
    tag = read_u8(stream)
    if tag not in _DTYPE_CODES:
        raise ParseError(f"unknown array dtype tag {tag}")
    dtype = np.dtype(_DTYPE_CODES[tag]).newbyteorder("<")
    ndim = read_u8(stream)
    shape = tuple(read_u32(stream) for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(stream, count * dtype.itemsize)
    arr = np.frombuffer(raw, dtype=dtype, count=count).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_array(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_header(fh, KIND_ARRAY)
        write_array(fh, arr)


def load_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        read_header(fh, KIND_ARRAY)
        return read_array(fh)


def array_to_bytes(arr: np.ndarray, kind: int = KIND_ARRAY) -> bytes:
    buf = io.BytesIO()
    write_header(buf, kind)
    write_array(buf, arr)
    return buf.getvalue()
