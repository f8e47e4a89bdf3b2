"""Little-endian tensor containers shared by checkpoints and dataset exports.

Layout::

    magic (8 bytes) | version u32 | meta_len u32 | meta (UTF-8 JSON)
    | n_tensors u32
    | per tensor: name_len u32 | name (UTF-8) | dtype u32 | ndim u32
                  | dims u32 * ndim | payload (row-major)
    | sha256 digest (32 bytes) of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FormatError

VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("int64"): 1}


class Reader:
    """Cursor over a byte buffer that raises :class:`FormatError` on short reads."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{what} short: expected {n} bytes, found {len(self.data) - self.pos}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what: str) -> str:
        n = self.u32(f"{what} length")
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} is not valid UTF-8") from exc

    def remaining(self) -> int:
        return len(self.data) - self.pos


def pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def check_magic(reader: Reader, magic: bytes) -> None:
    got = reader.take(len(magic), "magic")
    if got != magic:
        raise FormatError(f"bad magic: expected {magic!r}, found {got!r}")
    version = reader.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version: {version} (expected {VERSION})")


def write_container(path: str | Path, magic: bytes, tensors: dict[str, np.ndarray],
                    meta: dict[str, Any]) -> bytes:
    """Serialize ``tensors`` and ``meta``; write to ``path`` and return the bytes."""
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    parts = [magic, struct.pack("<I", VERSION)]
    parts.append(pack_string(json.dumps(meta, sort_keys=True, separators=(",", ":"))))
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODES:
            raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        parts.append(pack_string(name))
        parts.append(struct.pack("<II", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    body = b"".join(parts)
    blob = body + hashlib.sha256(body).digest()
    Path(path).write_bytes(blob)
    return blob


def read_container(path: str | Path, magic: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    data = Path(path).read_bytes()
    if len(data) < 32:
        raise FormatError(f"file too short: {len(data)} bytes")
    body, digest = data[:-32], data[-32:]
    reader = Reader(body)
    check_magic(reader, magic)
    meta_raw = reader.string("meta")
    try:
        meta = json.loads(meta_raw)
    except json.JSONDecodeError as exc:
        raise FormatError("meta is not valid JSON") from exc
    n = reader.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(n):
        name = reader.string(f"tensor {i} name")
        code = reader.u32(f"tensor {name!r} dtype")
        if code not in _DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        ndim = reader.u32(f"tensor {name!r} ndim")
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim, f"tensor {name!r} shape"))
        dtype = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        need = count * dtype.itemsize
        if reader.remaining() < need:
            raise FormatError(
                f"tensor {name!r} payload short: expected {count} values"
            )
        raw = reader.take(need, f"tensor {name!r} payload")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if reader.remaining():
        raise FormatError(f"trailing bytes: {reader.remaining()}")
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("content hash mismatch")
    return tensors, meta
