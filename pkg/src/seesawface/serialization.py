"""SSFN binary weight container.

Layout (all integers little-endian)::

    b"SSFN" | version:u32 | record_count:u32
    record_count x ( name_len:u32 | name:utf-8 | dtype:u8 | rank:u32 | dims:u32*rank | values )

dtype tags: 0 = float32, 1 = float64, 2 = int64.  Values are raw
little-endian in C order.  Records keep insertion order, so writing the
same mapping twice yields identical bytes.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"SSFN"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {dt: tag for tag, dt in _DTYPES.items()}


class FormatError(ValueError):
    pass


def write_records(f: BinaryIO, records: Mapping[str, np.ndarray]) -> None:
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, len(records)))
    for name, arr in records.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<BI", _TAGS[dt], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def read_records(f: BinaryIO) -> dict[str, np.ndarray]:
    if _read_exact(f, 4, "magic") != MAGIC:
        raise FormatError("not an SSFN file (bad magic)")
    version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported SSFN version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
        name = _read_exact(f, n, "name").decode("utf-8")
        tag, rank = struct.unpack("<BI", _read_exact(f, 5, f"{name} header"))
        if tag not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype tag {tag}")
        dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"{name} dims"))
        dt = _DTYPES[tag]
        size = int(np.prod(dims, dtype=np.int64))
        buf = _read_exact(f, size * dt.itemsize, f"{name} values")
        out[name] = np.frombuffer(buf, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if f.read(1):
        raise FormatError("trailing bytes after last record")
    return out


def dumps(records: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_records(buf, records)
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    return read_records(io.BytesIO(data))


def save(path: str | Path, records: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        write_records(f, records)


def load(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return read_records(f)
