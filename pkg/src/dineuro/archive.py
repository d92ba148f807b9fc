"""DTNA: a small named-tensor archive.

Layout (all integers little-endian)::

    b"DTNA" | u32 version=1 | u32 count
    per entry: u16 name_len | utf-8 name | u8 dtype (0=f32, 1=f64) | u8 rank
               | rank x u64 extents | raw little-endian payload
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import ArchiveError
from .tensor import Tensor

MAGIC = b"DTNA"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _array(value):
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def dumps(tensors) -> bytes:
    """Serialize a mapping of name -> Tensor/ndarray (insertion order kept)."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    seen = set()
    for name, value in tensors.items():
        if not name:
            raise ValueError("tensor names must be non-empty")
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = _array(value)
        if arr.dtype not in _CODES:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"{name}: name too long")
        if arr.ndim > 255:
            raise ValueError(f"{name}: rank too large")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise ArchiveError(f"truncated {what}: need {n} bytes, "
                               f"{len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes) -> dict:
    """Parse archive bytes into an ordered dict of name -> ndarray."""
    r = _Reader(memoryview(buf))
    if bytes(r.take(4, "magic")) != MAGIC:
        raise ArchiveError("bad magic, expected b'DTNA'", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise ArchiveError(f"unsupported version {version}", 4)
    (count,) = r.unpack("<I", "entry count")
    out = {}
    for _ in range(count):
        start = r.pos
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = bytes(r.take(nlen, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise ArchiveError("name is not valid UTF-8", start + 2) from None
        if not name:
            raise ArchiveError("empty tensor name", start)
        if name in out:
            raise ArchiveError(f"duplicate tensor name {name!r}", start)
        code_pos = r.pos
        code, rank = r.unpack("<BB", "dtype/rank")
        if code not in _DTYPES:
            raise ArchiveError(f"unknown dtype code {code}", code_pos)
        shape = r.unpack(f"<{rank}Q", "extents")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.uint64)) * dt.itemsize
        payload = r.take(nbytes, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        out[name] = arr
    if r.pos != len(buf):
        raise ArchiveError("trailing bytes after last entry", r.pos)
    return out


def save(path, tensors) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(tensors))
    os.replace(tmp, path)


def load(path) -> dict:
    with open(path, "rb") as fh:
        return loads(fh.read())
