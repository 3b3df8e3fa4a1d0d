"""Binary checkpoint container.

Layout, all integers little-endian:

    magic   4 bytes  b"LEGO"
    version u32      currently 1
    count   u32      number of entries
    entry*  name_len u32, name utf-8 bytes,
            dtype u8 (0 = float64, 1 = float32, 2 = int32),
            rank u32, dims u64 each, payload (raw little-endian values)
    check   u64      FNV-1a over every preceding byte

Loading is all-or-nothing: any malformed, truncated, or corrupted file
raises CheckpointError and yields no partial data. Entry order is
preserved, so identical contents produce identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import struct
from typing import Mapping

import numpy as np

MAGIC = b"LEGO"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i4")}
_CODE_FOR_KIND = {"f8": 0, "f4": 1, "i4": 2}

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF


class CheckpointError(ValueError):
    """Unusable checkpoint bytes. ``kind`` is one of: magic, version,
    truncated, checksum, encoding."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


def fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _U64_MASK
    return h


def _canonical_array(value) -> np.ndarray:
    arr = np.asarray(getattr(value, "data", value))
    if arr.dtype == np.float64:
        return arr.astype("<f8", copy=False)
    if arr.dtype == np.float32:
        return arr.astype("<f4", copy=False)
    if arr.dtype.kind == "i":
        out = arr.astype("<i4")
        if not np.array_equal(out.astype(arr.dtype), arr):
            raise CheckpointError("encoding", "integer entry exceeds 32-bit range")
        return out
    raise CheckpointError("encoding", f"unsupported dtype {arr.dtype}")


def serialize(entries: Mapping[str, object]) -> bytes:
    """Encode named arrays (Tensor or ndarray values) to container bytes."""
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(entries)))
    for name, value in entries.items():
        arr = _canonical_array(value)
        name_b = name.encode("utf-8")
        out.write(struct.pack("<I", len(name_b)))
        out.write(name_b)
        out.write(struct.pack("<BI", _CODE_FOR_KIND[arr.dtype.str[1:]], arr.ndim))
        for dim in arr.shape:
            out.write(struct.pack("<Q", dim))
        out.write(np.ascontiguousarray(arr).tobytes())
    body = out.getvalue()
    return body + struct.pack("<Q", fnv1a(body))


def deserialize(blob: bytes) -> dict[str, np.ndarray]:
    """Decode container bytes; inverse of serialize."""
    if len(blob) < len(MAGIC) + 8 + 8:
        raise CheckpointError("truncated", f"{len(blob)} bytes is too short")
    if blob[:4] != MAGIC:
        raise CheckpointError("magic", f"bad leading bytes {blob[:4]!r}")
    body, check = blob[:-8], struct.unpack("<Q", blob[-8:])[0]
    if fnv1a(body) != check:
        raise CheckpointError("checksum", "stored checksum does not match contents")

    pos = 4
    version, count = struct.unpack_from("<II", body, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError("version", f"version {version}, expected {VERSION}")

    def need(n: int) -> int:
        if pos + n > len(body):
            raise CheckpointError("truncated", "entry data runs past end of file")
        return pos

    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(4)
        (name_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        need(name_len)
        try:
            name = body[pos : pos + name_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("encoding", f"entry name is not utf-8: {e}")
        pos += name_len
        need(5)
        code, rank = struct.unpack_from("<BI", body, pos)
        pos += 5
        if code not in _DTYPE_CODES:
            raise CheckpointError("encoding", f"unknown dtype code {code}")
        need(8 * rank)
        dims = struct.unpack_from(f"<{rank}Q", body, pos) if rank else ()
        pos += 8 * rank
        n_items = 1
        for dim in dims:
            n_items *= dim
        dt = _DTYPE_CODES[code]
        need(n_items * dt.itemsize)
        arr = np.frombuffer(body, dtype=dt, count=n_items, offset=pos).reshape(dims)
        pos += n_items * dt.itemsize
        if name in out:
            raise CheckpointError("encoding", f"duplicate entry name {name!r}")
        out[name] = arr.copy()
    if pos != len(body):
        raise CheckpointError("encoding", f"{len(body) - pos} trailing bytes")
    return out


def save_checkpoint(path: str, entries: Mapping[str, object]) -> None:
    blob = serialize(entries)
    with open(path, "wb") as f:
        f.write(blob)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return deserialize(f.read())


def digest(entries: Mapping[str, object]) -> str:
    """Stable content fingerprint: sha256 over the canonical bytes."""
    return hashlib.sha256(serialize(entries)).hexdigest()
