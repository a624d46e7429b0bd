"""Binary container shared by process-tensor and trajectory files.

Layout (all integers little-endian)::

    magic (8 bytes) | version u32 | total length u64 | metadata length u64
    metadata (UTF-8 JSON)
    array count u64
    per array: rank u32 | shape u64 * rank | data as (re, im) f64 pairs
    sha256 of all preceding bytes (32 bytes)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ChecksumError, FileFormatError, TruncatedFileError, VersionError

FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQQ")
_DIGEST_SIZE = 32


def encode(magic: bytes, meta: dict, arrays: Sequence[np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = [struct.pack("<Q", len(arrays))]
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<c16")
        body.append(struct.pack("<I", a.ndim))
        body.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        body.append(a.tobytes())
    body = b"".join(body)
    total = _HEADER.size + len(meta_bytes) + len(body) + _DIGEST_SIZE
    payload = _HEADER.pack(magic, FORMAT_VERSION, total, len(meta_bytes)) + meta_bytes + body
    return payload + hashlib.sha256(payload).digest()


def decode(data: bytes, magic: bytes, source: str = "<bytes>"):
    """Inverse of :func:`encode`; returns ``(meta, arrays)``."""
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{source}: file shorter than the header")
    got_magic, version, total, meta_len = _HEADER.unpack_from(data, 0)
    if got_magic != magic:
        raise FileFormatError(f"{source}: wrong file type (magic {got_magic!r})")
    if version != FORMAT_VERSION:
        raise VersionError(f"{source}: file format version {version}, "
                           f"this reader supports version {FORMAT_VERSION}")
    if len(data) < total:
        raise TruncatedFileError(f"{source}: {len(data)} bytes present, {total} expected")
    if len(data) > total:
        raise FileFormatError(f"{source}: {len(data) - total} trailing bytes")
    payload, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError(f"{source}: checksum mismatch")
    pos = _HEADER.size
    try:
        meta = json.loads(payload[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<Q", payload, pos)
        pos += 8
        arrays = []
        for _ in range(count):
            (rank,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", payload, pos)
            pos += 8 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 16 * n > len(payload):
                raise FileFormatError(f"{source}: array extends past the end of the data")
            arr = np.frombuffer(payload, dtype="<c16", count=n, offset=pos)
            arrays.append(arr.reshape(shape).astype(complex))
            pos += 16 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{source}: malformed content ({exc})") from exc
    if pos != len(payload):
        raise FileFormatError(f"{source}: unexpected bytes after the last array")
    return meta, arrays


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
