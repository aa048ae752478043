"""Versioned binary container for parameter and dataset files.

One format serves backbone checkpoints, adapter stacks, the federation
wire payload, and dataset dumps. Layout (all integers little-endian):

    header   16 bytes   magic b"FMA1", file kind u32, entry count u32,
                        meta length u32
    meta     variable   packed struct, schema fixed per file kind
    entries  repeated   24-byte entry header (section u32, block u32,
                        part u32, rows u32, cols u32, reserved u32)
                        followed by rows*cols float64 values
    digest   32 bytes   SHA-256 over every preceding byte

Byte accounting is therefore exact and closed-form: a file with n
entries holding s total float64 values occupies

    16 + meta_len + 24*n + 8*s + 32   bytes.

For the shared-projection wire payload (kind SHARED, meta 24 bytes) that
is 72 + 24*n + 8*n*r*r with n aggregated blocks.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable

import numpy as np

from .errors import ProtocolError

MAGIC = b"FMA1"

KIND_BACKBONE = 1
KIND_ADAPTER = 2
KIND_SHARED = 3
KIND_DATASET = 4

SECTION_ADAPTER = 0
SECTION_VISION = 1
SECTION_TEXT = 2
SECTION_COMMON = 3

_HEADER = struct.Struct("<4sIII")
_ENTRY = struct.Struct("<IIIIII")
_DIGEST_LEN = 32

HEADER_LEN = _HEADER.size
ENTRY_HEADER_LEN = _ENTRY.size


class Entry:
    """One named matrix inside a container."""

    __slots__ = ("section", "block", "part", "array")

    def __init__(self, section: int, block: int, part: int, array: np.ndarray):
        self.section = section
        self.block = block
        self.part = part
        self.array = np.ascontiguousarray(array, dtype=np.float64)
        if self.array.ndim != 2:
            raise ProtocolError(f"container entries are 2-D, got shape {array.shape}")

    def key(self) -> tuple[int, int, int]:
        return (self.section, self.block, self.part)


def pack(kind: int, meta: bytes, entries: Iterable[Entry]) -> bytes:
    entries = list(entries)
    chunks = [_HEADER.pack(MAGIC, kind, len(entries), len(meta)), meta]
    for e in entries:
        rows, cols = e.array.shape
        chunks.append(_ENTRY.pack(e.section, e.block, e.part, rows, cols, 0))
        chunks.append(e.array.astype("<f8").tobytes())
    body = b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def unpack(blob: bytes) -> tuple[int, bytes, list[Entry]]:
    if len(blob) < HEADER_LEN + _DIGEST_LEN:
        raise ProtocolError("container truncated")
    body, digest = blob[:-_DIGEST_LEN], blob[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise ProtocolError("container digest mismatch")
    magic, kind, count, meta_len = _HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad container magic {magic!r}")
    offset = HEADER_LEN
    meta = body[offset : offset + meta_len]
    offset += meta_len
    entries = []
    for _ in range(count):
        if offset + ENTRY_HEADER_LEN > len(body):
            raise ProtocolError("container entry header truncated")
        section, block, part, rows, cols, _ = _ENTRY.unpack_from(body, offset)
        offset += ENTRY_HEADER_LEN
        nbytes = rows * cols * 8
        if offset + nbytes > len(body):
            raise ProtocolError("container entry data truncated")
        array = np.frombuffer(body, dtype="<f8", count=rows * cols, offset=offset)
        entries.append(Entry(section, block, part, array.reshape(rows, cols).copy()))
        offset += nbytes
    if offset != len(body):
        raise ProtocolError("container has trailing bytes")
    return kind, meta, entries


def digest_hex(blob: bytes) -> str:
    """Content digest of a packed container (its trailing SHA-256)."""
    return blob[-_DIGEST_LEN:].hex()


def container_size(n_entries: int, n_values: int, meta_len: int) -> int:
    """Exact byte size of a container, from the documented layout."""
    return HEADER_LEN + meta_len + ENTRY_HEADER_LEN * n_entries + 8 * n_values + _DIGEST_LEN
