"""Independent oracles shared by the test modules.

Nothing here calls into the package's hashing or tree code.
"""

from __future__ import annotations

import hashlib
import struct

from authlsm.record import Record


def sha(*parts: bytes) -> bytes:
    return hashlib.sha256(b"".join(parts)).digest()


def enc(key: bytes, value: bytes, ts: int, tomb: bool = False) -> bytes:
    return (
        struct.pack("<I", len(key)) + key + struct.pack("<QB", ts, int(tomb))
        + struct.pack("<I", len(value)) + value
    )


def enc_r(r: Record) -> bytes:
    return enc(r.key, r.value, r.ts, r.tombstone)


def oracle_chain(chain: list[Record]) -> bytes:
    c = sha(b"\x00", enc_r(chain[-1]))
    for r in reversed(chain[:-1]):
        c = sha(b"\x01", enc_r(r), c)
    return c


def oracle_root(records: list[Record]) -> bytes:
    """Root of a level, recomputed from scratch: group, chain, pair up, promote odd nodes."""
    if not records:
        return sha(b"\x03")
    groups: dict[bytes, list[Record]] = {}
    for r in records:
        groups.setdefault(r.key, []).append(r)
    layer = [oracle_chain(sorted(groups[k], key=lambda r: -r.ts)) for k in sorted(groups)]
    while len(layer) > 1:
        nxt = []
        for i in range(0, len(layer), 2):
            if i + 1 < len(layer):
                nxt.append(sha(b"\x02", layer[i], layer[i + 1]))
            else:
                nxt.append(layer[i])
        layer = nxt
    return layer[0]


def rec(key: str, ts: int, value: str | None = None) -> Record:
    v = value if value is not None else f"{key}{ts}"
    return Record(key.encode(), v.encode(), ts)


WORKED_L1 = [rec("A", 9)]
WORKED_L2 = [rec("T", 4), rec("Z", 7), rec("Z", 6)]
WORKED_L3 = [rec("A", 2), rec("T", 0), rec("Y", 3), rec("Z", 1)]
WORKED_LEVELS = {1: WORKED_L1, 2: WORKED_L2, 3: WORKED_L3}
