"""Records, their ordering, and the canonical byte encoding all hashes are taken over."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

MAX_KEY_LEN = 0xFFFF
MAX_VALUE_LEN = 0xFFFFFFFF
MAX_TS = 0xFFFFFFFFFFFFFFFF

# Domain-separation tags prefixed to every hash preimage.
TAG_LEAF = b"\x00"
TAG_LINK = b"\x01"
TAG_NODE = b"\x02"
TAG_EMPTY = b"\x03"
TAG_WAL_BASE = b"\x04"
TAG_WAL_STEP = b"\x05"
TAG_STATE = b"\x06"

DIGEST_SIZE = 32

_HEAD = struct.Struct("<I")
_TS_FLAGS = struct.Struct("<QB")

FLAG_TOMBSTONE = 0x01


class RecordError(ValueError):
    pass


def H(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


@dataclass(frozen=True, slots=True)
class Record:
    key: bytes
    value: bytes
    ts: int
    tombstone: bool = False

    def __post_init__(self) -> None:
        if not isinstance(self.key, bytes) or not isinstance(self.value, bytes):
            raise RecordError("key and value must be bytes")
        if not 1 <= len(self.key) <= MAX_KEY_LEN:
            raise RecordError(f"key length {len(self.key)} outside 1..{MAX_KEY_LEN}")
        if len(self.value) > MAX_VALUE_LEN:
            raise RecordError("value too long")
        if not 0 <= self.ts <= MAX_TS:
            raise RecordError(f"timestamp {self.ts} outside u64 range")
        if self.tombstone and self.value:
            raise RecordError("tombstone records carry an empty value")

    @property
    def sort_key(self) -> tuple[bytes, int]:
        return (self.key, -self.ts)

    def __str__(self) -> str:
        key = self.key.decode("utf-8", "backslashreplace")
        mark = ",DEL" if self.tombstone else ""
        return f"<{key},{self.ts}{mark}>"


def tombstone(key: bytes, ts: int) -> Record:
    return Record(key, b"", ts, True)


def encode_record(r: Record) -> bytes:
    """key_len u32 | key | ts u64 | flags u8 | val_len u32 | value, all little-endian."""
    return b"".join(
        (
            _HEAD.pack(len(r.key)),
            r.key,
            _TS_FLAGS.pack(r.ts, FLAG_TOMBSTONE if r.tombstone else 0),
            _HEAD.pack(len(r.value)),
            r.value,
        )
    )


def decode_record(buf: bytes, offset: int = 0) -> tuple[Record, int]:
    """Decode one record at ``offset``; returns the record and the offset just past it."""
    try:
        (klen,) = _HEAD.unpack_from(buf, offset)
        pos = offset + 4
        key = bytes(buf[pos : pos + klen])
        pos += klen
        ts, flags = _TS_FLAGS.unpack_from(buf, pos)
        pos += _TS_FLAGS.size
        (vlen,) = _HEAD.unpack_from(buf, pos)
        pos += 4
        value = bytes(buf[pos : pos + vlen])
        pos += vlen
    except struct.error as exc:
        raise RecordError(f"truncated record at offset {offset}") from exc
    if len(key) != klen or len(value) != vlen:
        raise RecordError(f"truncated record at offset {offset}")
    if flags & ~FLAG_TOMBSTONE:
        raise RecordError(f"unknown flag bits {flags:#x}")
    return Record(key, value, ts, bool(flags & FLAG_TOMBSTONE)), pos


def decode_exact(buf: bytes) -> Record:
    r, end = decode_record(buf)
    if end != len(buf):
        raise RecordError("trailing bytes after record")
    return r


def record_order(a: Record, b: Record) -> int:
    """-1/0/1: key ascending, then newest (largest ts) first."""
    ka, kb = a.sort_key, b.sort_key
    return (ka > kb) - (ka < kb)


def encoded_size(r: Record) -> int:
    return 17 + len(r.key) + len(r.value)
