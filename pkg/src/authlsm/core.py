"""The trusted half: roots, the L0 buffer, the WAL digest, sealing and rollback binding.

Everything the core returns has been checked against its own roots. The
attached store is treated as hostile: every proof is verified, and every
compaction input is rebuilt and compared before its output is installed.

Durability model: the WAL is split into epochs, one file per epoch. A flush
starts a new epoch, so the sealed ``(wal_epoch, wal_len, wal_digest)`` always
describes exactly one file. A write is admitted when the sealed state that
includes it has been written; a frame appended before a crash but never
sealed is an in-flight write and is discarded on recovery.
"""

from __future__ import annotations

import heapq
import hmac
import json
import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .merkle import (
    EMPTY_ROOT,
    LevelTreeBuilder,
    NonMembershipProof,
    ProofError,
    Reason,
    TreeError,
    build_level_tree,
    verify_future_only,
    verify_membership,
    verify_non_membership,
    verify_range,
)
from .record import (
    MAX_TS,
    TAG_STATE,
    TAG_WAL_BASE,
    TAG_WAL_STEP,
    H,
    Record,
    encode_record,
    encoded_size,
    tombstone,
)
from .store import CorruptFrame, GetResponse, UntrustedStore
from .wire import WireError, decode_embedded, embedded_proofs

log = logging.getLogger(__name__)

DEFAULT_SEAL_KEY = b"authlsm-fixed-test-seal-key-0001"  # simulation only; real deployments seal in hardware
WAL_BASE = H(TAG_WAL_BASE)
_COUNTER = struct.Struct("<Q32s")


class CoreError(Exception):
    pass


class VerificationFailed(CoreError):
    def __init__(self, level: int | None, reason: Reason | str, detail: str = ""):
        self.level = level
        self.reason = Reason(reason) if not isinstance(reason, Reason) else reason
        where = f"level {level}" if level is not None else "response"
        super().__init__(f"{where}: {self.reason.value}" + (f" ({detail})" if detail else ""))


class SealTampered(CoreError):
    pass


class WalMismatch(CoreError):
    pass


class RollbackDetected(CoreError):
    pass


class CounterIoError(CoreError):
    pass


class SimulatedCrash(BaseException):
    """Raised by crash hooks; derives from BaseException so no handler in the write path swallows it."""


def wal_step(digest: bytes, r: Record) -> bytes:
    return H(TAG_WAL_STEP, digest, encode_record(r))


def wal_fold(records: Iterable[Record], start: bytes = WAL_BASE) -> bytes:
    d = start
    for r in records:
        d = wal_step(d, r)
    return d


def state_hash(roots: Sequence[bytes], wal_digest: bytes) -> bytes:
    return H(TAG_STATE, *roots, wal_digest)


@dataclass
class CoreConfig:
    q: int = 7
    l0_capacity: int = 4 * 1024 * 1024
    growth_factor: int = 10
    base_size: int | None = None  # defaults to l0_capacity
    bind_interval: int = 64  # 0 disables automatic binding
    retention: str = "all"  # "all" | "latest"
    seal_key: bytes = DEFAULT_SEAL_KEY
    fsync: bool = False
    counter_path: str | None = None  # defaults to "<store>.counter" next to the store

    def __post_init__(self) -> None:
        if not 1 <= self.q <= 0xFFFF:
            raise ValueError("q must be in 1..65535")
        if self.l0_capacity <= 0 or self.growth_factor < 2:
            raise ValueError("l0_capacity must be positive and growth_factor at least 2")
        if self.retention not in ("all", "latest"):
            raise ValueError(f"unknown retention mode {self.retention!r}")
        if self.bind_interval < 0:
            raise ValueError("bind_interval must be >= 0")

    def level_limit(self, level: int) -> int:
        base = self.base_size if self.base_size is not None else self.l0_capacity
        return self.growth_factor**level * base


@dataclass
class LevelMeta:
    leaf_count: int = 0
    record_count: int = 0
    bytes: int = 0


@dataclass
class Stats:
    flushes: int = 0
    compactions: int = 0
    binds: int = 0
    verified_records: int = 0
    verified_bytes: int = 0


@dataclass
class ReadResult:
    record: Record | None  # None when absent or deleted
    source: str  # "l0" or "store"
    hit_level: int | None = None
    entries: int = 0
    hash_count: int = 0
    proof_bytes: int = 0


@dataclass
class FsckReport:
    levels: dict[int, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(v == "ok" for v in self.levels.values())


class TrustedCore:
    """The simulated enclave attached to one untrusted store."""

    def __init__(self, store: UntrustedStore, config: CoreConfig | None = None, *, audit: bool = True):
        self.store = store
        self.config = config or CoreConfig(q=store.q)
        if self.config.q != store.q:
            raise ValueError(f"config q={self.config.q} but store q={store.q}")
        q = self.config.q
        self.roots: list[bytes] = [EMPTY_ROOT] * (q + 1)  # index 0 unused
        self.meta: list[LevelMeta] = [LevelMeta() for _ in range(q + 1)]
        self.buffer: dict[bytes, list[Record]] = {}  # newest first
        self.buffer_bytes = 0
        self.wal_epoch = 0
        self.wal_len = 0
        self.wal_digest = WAL_BASE
        self.global_ts = 0
        self.binding: tuple[int, bytes] = (0, b"\x00" * 32)
        self.writes_since_bind = 0
        self.stats = Stats()
        self.crash_hook: Callable[[str], None] | None = None
        self.flush_hook: Callable[[str], None] | None = None  # called after each flush/compaction commits
        self._lock = threading.RLock()
        self._recover()
        if audit:
            self.audit_rollback()

    @classmethod
    def open(cls, path, config: CoreConfig | None = None, *, audit: bool = True, lock: bool = False) -> TrustedCore:
        config = config or CoreConfig()
        store = UntrustedStore(path, config.q, fsync=config.fsync, lock=lock)
        return cls(store, config, audit=audit)

    def close(self) -> None:
        self.store.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def counter_path(self) -> Path:
        if self.config.counter_path:
            return Path(self.config.counter_path)
        return self.store.path.with_name(self.store.path.name + ".counter")

    def _crash(self, point: str) -> None:
        if self.crash_hook is not None:
            self.crash_hook(point)

    def set_crash_hook(self, hook: Callable[[str], None] | None) -> None:
        self.crash_hook = hook
        self.store.hook = hook

    # ------------------------------------------------------------ sealing

    def _sealed_fields(self) -> dict:
        q = self.config.q
        return {
            "q": q,
            "roots": [self.roots[i].hex() for i in range(1, q + 1)],
            "levels": [[m.leaf_count, m.record_count, m.bytes] for m in self.meta[1:]],
            "wal_epoch": self.wal_epoch,
            "wal_len": self.wal_len,
            "wal_digest": self.wal_digest.hex(),
            "global_ts": self.global_ts,
            "binding": [self.binding[0], self.binding[1].hex()],
            "writes_since_bind": self.writes_since_bind,
        }

    def seal(self) -> bytes:
        body = json.dumps(self._sealed_fields(), sort_keys=True, separators=(",", ":")).encode()
        return body + hmac.new(self.config.seal_key, body, "sha256").digest()

    def _write_seal(self) -> None:
        self.store.write_sealed(self.seal())

    def _unseal(self, blob: bytes) -> None:
        body, mac = blob[:-32], blob[-32:]
        if len(blob) < 32 or not hmac.compare_digest(mac, hmac.new(self.config.seal_key, body, "sha256").digest()):
            raise SealTampered("sealed state fails its MAC")
        try:
            s = json.loads(body)
            q = self.config.q
            if s["q"] != q:
                raise SealTampered(f"sealed for q={s['q']}, configured q={q}")
            self.roots = [EMPTY_ROOT] + [bytes.fromhex(h) for h in s["roots"]]
            self.meta = [LevelMeta()] + [LevelMeta(*m) for m in s["levels"]]
            self.wal_epoch = s["wal_epoch"]
            self.wal_len = s["wal_len"]
            self.wal_digest = bytes.fromhex(s["wal_digest"])
            self.global_ts = s["global_ts"]
            self.binding = (s["binding"][0], bytes.fromhex(s["binding"][1]))
            self.writes_since_bind = s["writes_since_bind"]
        except (KeyError, TypeError, ValueError) as exc:
            raise SealTampered(f"sealed state unreadable: {exc}") from None

    # ------------------------------------------------------------ recovery

    def _recover(self) -> None:
        blob = self.store.read_sealed()
        if blob is None:
            if self.store.levels_present() or any(self.store.wal_dir.glob("*.wal")):
                raise SealTampered("store has data but no sealed state")
            self.store.wal_use_epoch(0, fresh=True)
            self._write_seal()
            return
        self._unseal(blob)
        for level in range(1, self.config.q + 1):
            if not self.store.reconcile(level, self.roots[level]):
                log.warning("level %d: no run file claims the sealed root", level)
        self.store.wal_use_epoch(self.wal_epoch)
        try:
            scan = self.store.wal_scan()
        except CorruptFrame as exc:
            raise WalMismatch(str(exc)) from None
        frames = scan.frames
        if len(frames) < self.wal_len:
            raise WalMismatch(f"WAL holds {len(frames)} frames, sealed state admits {self.wal_len}")
        if len(frames) > self.wal_len + 1 or (len(frames) > self.wal_len and scan.torn_tail):
            raise WalMismatch(f"WAL holds {len(frames) - self.wal_len} unadmitted frames")
        admitted = [r for _, r in frames[: self.wal_len]]
        if wal_fold(admitted) != self.wal_digest:
            raise WalMismatch("WAL digest chain diverges from sealed digest")
        end = frames[self.wal_len][0] if len(frames) > self.wal_len else scan.end
        if len(frames) > self.wal_len or scan.torn_tail:
            log.info("discarding unadmitted WAL tail at offset %d", end)
            self.store.wal_truncate(end)
        for r in admitted:
            self._buffer_add(r)
        self.store.wal_drop_other_epochs()
        self.store.commit_runs()

    def _buffer_add(self, r: Record) -> None:
        self.buffer.setdefault(r.key, []).insert(0, r)
        self.buffer_bytes += encoded_size(r)

    # ------------------------------------------------------------ writes

    def put(self, key: bytes, value: bytes) -> int:
        return self._write(lambda ts: Record(key, value, ts))

    def delete(self, key: bytes) -> int:
        return self._write(lambda ts: tombstone(key, ts))

    def _write(self, make: Callable[[int], Record]) -> int:
        with self._lock:
            r = make(self.global_ts + 1)
            digest = wal_step(self.wal_digest, r)
            self.store.wal_append(r)  # an OSError here leaves trusted state untouched
            self._crash("put:after_wal_append")
            self.global_ts = r.ts
            self.wal_digest = digest
            self.wal_len += 1
            self.writes_since_bind += 1
            self._buffer_add(r)
            self._write_seal()
            self._crash("put:after_seal")
            if self.buffer_bytes > self.config.l0_capacity:
                self.flush()
            if self.config.bind_interval and self.writes_since_bind >= self.config.bind_interval:
                self.bind_counter()
            return r.ts

    def _buffer_records(self) -> list[Record]:
        out = []
        for k in sorted(self.buffer):
            out.extend(self.buffer[k])
        return out

    def _verified_input(self, level: int) -> list[Record]:
        """Stream a level from the store, rebuild its tree and require the trusted root."""
        records = []
        builder = LevelTreeBuilder(level)
        try:
            for r, src in self.store.stream_level(level):
                if src != level:
                    raise VerificationFailed(level, Reason.MALFORMED, f"record tagged with level {src}")
                builder.add(r)
                records.append(r)
        except TreeError as exc:
            raise VerificationFailed(level, Reason.MALFORMED, str(exc)) from None
        tree = builder.finish()
        if tree.root != self.roots[level]:
            raise VerificationFailed(level, Reason.ROOT_MISMATCH, "compaction input")
        self.stats.verified_records += len(records)
        self.stats.verified_bytes += sum(encoded_size(r) for r in records)
        return records

    def _merge(self, newer: list[Record], older: list[Record], target: int) -> list[Record]:
        merged = list(heapq.merge(newer, older, key=lambda r: r.sort_key))
        if self.config.retention == "all":
            return merged
        deepest = all(self.roots[j] == EMPTY_ROOT for j in range(target + 1, self.config.q + 1))
        out, last = [], None
        for r in merged:
            if r.key == last:
                continue
            last = r.key
            if r.tombstone and deepest:
                continue
            out.append(r)
        return out

    def _install(self, level: int, records: list[Record]) -> None:
        try:
            tree = build_level_tree(level, records)
        except TreeError as exc:
            # Duplicate (key, ts) across inputs can only come from a forged run.
            raise VerificationFailed(level, Reason.MALFORMED, str(exc)) from None
        proofs = embedded_proofs(tree) if records else []
        self.store.install_run(level, records, proofs, tree.root, tree)
        self.roots[level] = tree.root
        self.meta[level] = LevelMeta(len(tree), len(records), sum(encoded_size(r) for r in records))

    def flush(self) -> None:
        """Merge the L0 buffer into level 1 and start a new WAL epoch."""
        with self._lock:
            if not self.buffer:
                raise ValueError("flush of an empty buffer")
            saved = (list(self.roots), list(self.meta))
            older = self._verified_input(1)
            merged = self._merge(self._buffer_records(), older, 1)
            try:
                self._install(1, merged)
                self._crash("flush:after_install")
                self.wal_epoch += 1
                self.store.wal_use_epoch(self.wal_epoch, fresh=True)
                self.wal_len = 0
                self.wal_digest = WAL_BASE
                self.buffer.clear()
                self.buffer_bytes = 0
                self._write_seal()
            except VerificationFailed:
                self.roots, self.meta = saved
                raise
            self._crash("flush:after_seal")
            self.store.commit_runs()
            self.store.wal_drop_other_epochs()
            self.stats.flushes += 1
            if self.flush_hook:
                self.flush_hook("flush")
            self._cascade()

    def _cascade(self) -> None:
        for level in range(1, self.config.q):
            if self.meta[level].bytes > self.config.level_limit(level):
                self.compact(level)

    def compact(self, level: int) -> None:
        """Merge level ``level`` into ``level + 1``, verifying both inputs first."""
        with self._lock:
            q = self.config.q
            if not 1 <= level < q:
                raise ValueError(f"compact level must be in 1..{q - 1}")
            if self.roots[level] == EMPTY_ROOT and self.roots[level + 1] == EMPTY_ROOT:
                return
            newer = self._verified_input(level)
            older = self._verified_input(level + 1)
            merged = self._merge(newer, older, level + 1)
            saved = (list(self.roots), list(self.meta))
            try:
                self._install(level + 1, merged)
                self._crash("compact:after_install_output")
                self._install(level, [])
                self._crash("compact:after_install_input")
                self._write_seal()
            except VerificationFailed:
                self.roots, self.meta = saved
                raise
            self._crash("compact:after_seal")
            self.store.commit_runs()
            self.stats.compactions += 1
            if self.flush_hook:
                self.flush_hook("compact")

    def bootstrap_levels(self, levels: Mapping[int, Sequence[Record]], global_ts: int | None = None) -> None:
        """Install prebuilt levels on a fresh store (trusted construction, e.g. for fixtures)."""
        with self._lock:
            if any(r != EMPTY_ROOT for r in self.roots[1:]) or self.global_ts or self.buffer:
                raise ValueError("bootstrap requires a fresh store")
            for level, records in sorted(levels.items()):
                if not 1 <= level <= self.config.q:
                    raise ValueError(f"level {level} out of range")
                self._install(level, sorted(records, key=lambda r: r.sort_key))
            newest = max((r.ts for rs in levels.values() for r in rs), default=0)
            self.global_ts = max(newest, global_ts or 0)
            self._write_seal()
            self.store.commit_runs()

    # ------------------------------------------------------------ reads

    def get(self, key: bytes, ts_q: int = MAX_TS) -> Record | None:
        return self.lookup(key, ts_q).record

    def lookup(self, key: bytes, ts_q: int = MAX_TS, *, measure: bool = False) -> ReadResult:
        """Verified point read; ``measure`` also reports the wire size of the proof bundle."""
        with self._lock:
            for r in self.buffer.get(key, ()):
                if r.ts <= ts_q:
                    return ReadResult(None if r.tombstone else r, "l0")
            roots = list(self.roots)
            counts = [m.leaf_count for m in self.meta]
            resp = self.store.serve_get(key, ts_q)
        hit = self._verify_get(key, ts_q, resp, roots, counts)
        res = ReadResult(
            None if hit is None or hit.tombstone else hit,
            "store",
            resp.hit_level if hit is not None else None,
            len(resp.entries),
        )
        if measure:
            res.hash_count = resp.hash_count()
            res.proof_bytes = resp.wire_size()
        return res

    def _verify_get(self, key, ts_q, resp: GetResponse, roots, counts) -> Record | None:
        entries = resp.entries
        q = self.config.q
        if not isinstance(entries, list) or not 1 <= len(entries) <= q:
            raise VerificationFailed(None, Reason.MISSING_LEVEL, f"{len(entries)} entries")
        for idx, e in enumerate(entries, start=1):
            last = idx == len(entries)
            try:
                if isinstance(e, NonMembershipProof):
                    verify_non_membership(roots[idx], key, e, level=idx, leaf_count=counts[idx])
                    continue
                rec, proof = e
                if rec is None:
                    verify_future_only(roots[idx], key, ts_q, proof, level=idx, leaf_count=counts[idx])
                    continue
                if not last:
                    raise VerificationFailed(idx, Reason.MALFORMED, "hit entry before the last level entry")
                verify_membership(roots[idx], key, ts_q, rec, proof, level=idx, leaf_count=counts[idx])
                return rec
            except ProofError as exc:
                raise VerificationFailed(idx, exc.reason, str(exc)) from None
            except (TypeError, ValueError, AttributeError) as exc:
                raise VerificationFailed(idx, Reason.MALFORMED, str(exc)) from None
        if len(entries) != q:
            raise VerificationFailed(len(entries) + 1, Reason.MISSING_LEVEL, "absence must cover every level")
        return None

    def scan(self, k1: bytes, k2: bytes, ts_q: int = MAX_TS) -> list[Record]:
        return self.scan_measured(k1, k2, ts_q)[0]

    def scan_measured(self, k1: bytes, k2: bytes, ts_q: int = MAX_TS) -> tuple[list[Record], int]:
        """Verified range read; returns the visible records and the proof's hash count."""
        if k1 > k2:
            raise ValueError("k1 > k2")
        q = self.config.q
        with self._lock:
            roots = list(self.roots)
            counts = [m.leaf_count for m in self.meta]
            buffered = [r for k, vs in self.buffer.items() if k1 <= k <= k2 for r in vs]
            proofs = self.store.serve_scan(k1, k2, ts_q)
        if len(proofs) != q:
            raise VerificationFailed(None, Reason.MISSING_LEVEL, f"{len(proofs)} of {q} levels")
        candidates = buffered
        hashes = 0
        for idx, (level, proof) in enumerate(proofs, start=1):
            if level != idx:
                raise VerificationFailed(idx, Reason.MISSING_LEVEL, f"got level {level}")
            try:
                candidates.extend(verify_range(roots[idx], k1, k2, proof, level=idx, leaf_count=counts[idx]))
            except ProofError as exc:
                raise VerificationFailed(idx, exc.reason, str(exc)) from None
            except (TypeError, ValueError, AttributeError) as exc:
                raise VerificationFailed(idx, Reason.MALFORMED, str(exc)) from None
            hashes += proof.hash_count
        best: dict[bytes, Record] = {}
        for r in candidates:
            if r.ts <= ts_q and (r.key not in best or r.ts > best[r.key].ts):
                best[r.key] = r
        return [best[k] for k in sorted(best) if not best[k].tombstone], hashes

    # ------------------------------------------------------------ rollback binding

    def current_state_hash(self) -> bytes:
        return state_hash(self.roots[1:], self.wal_digest)

    def _read_counter(self) -> tuple[int, bytes]:
        p = self.counter_path
        try:
            if not p.exists():
                return 0, b"\x00" * 32
            data = p.read_bytes()
        except OSError as exc:
            raise CounterIoError(str(exc)) from None
        if len(data) != _COUNTER.size:
            raise CounterIoError(f"counter file has {len(data)} bytes")
        return _COUNTER.unpack(data)

    def bind_counter(self) -> int:
        """Advance the monotonic counter and anchor the current state hash to it."""
        with self._lock:
            value, _ = self._read_counter()
            h = self.current_state_hash()
            tmp = self.counter_path.with_name(self.counter_path.name + ".tmp")
            try:
                tmp.write_bytes(_COUNTER.pack(value + 1, h))
                os.replace(tmp, self.counter_path)
            except OSError as exc:
                raise CounterIoError(str(exc)) from None
            self._crash("bind:after_counter_write")
            self.binding = (value + 1, h)
            self.writes_since_bind = 0
            self._write_seal()
            self.stats.binds += 1
            return value + 1

    def audit_rollback(self) -> str:
        """Return "ok" or raise RollbackDetected.

        The sealed state must carry the counter's latest binding. The one
        tolerated gap is a bind interrupted after the counter advanced but
        before the seal: then the counter's hash equals the current state hash.
        Writes made after the last bind and later rolled back to the bind
        point are not detectable here (the binding window).
        """
        with self._lock:
            dev_value, dev_hash = self._read_counter()
            value, h = self.binding
            if (value, h) == (dev_value, dev_hash):
                return "ok"
            if dev_value == value + 1 and dev_hash == self.current_state_hash():
                self.binding = (dev_value, dev_hash)
                self.writes_since_bind = 0
                self._write_seal()
                return "ok"
            raise RollbackDetected(f"sealed binding at counter {value}, device at {dev_value}")

    # ------------------------------------------------------------ offline checks

    def fsck(self) -> FsckReport:
        """Rebuild every level from its run file and check roots, counts and embedded proofs."""
        report = FsckReport()
        for level in range(1, self.config.q + 1):
            report.levels[level] = self._fsck_level(level)
        return report

    def _fsck_level(self, level: int) -> str:
        run = self.store.level_run(level)
        records = run.records if run else []
        proofs = run.proofs if run else []
        try:
            tree = build_level_tree(level, records)
        except TreeError as exc:
            return f"unsorted: {exc}"
        if tree.root != self.roots[level]:
            return "root-mismatch"
        if len(tree) != self.meta[level].leaf_count or len(records) != self.meta[level].record_count:
            return "count-mismatch"
        pos = 0
        for i, leaf in enumerate(tree.leaves):
            for p, r in enumerate(leaf.chain):
                try:
                    tail, path = decode_embedded(proofs[pos])
                    proof_obj = tree.membership_at(i, p)
                    proof_obj = type(proof_obj)(level, i, p, leaf.chain[:p], tail, path)
                    verify_membership(tree.root, r.key, r.ts, r, proof_obj, level=level, leaf_count=len(tree))
                except (WireError, ProofError, IndexError) as exc:
                    return f"bad-embedded-proof at record {pos}: {exc}"
                pos += 1
        return "ok"

    def level_records(self, level: int) -> list[Record]:
        """Records of a level as the store holds them (unverified; for tests and tooling)."""
        run = self.store.level_run(level)
        return list(run.records) if run else []


__all__ = [
    "CoreConfig",
    "CounterIoError",
    "FsckReport",
    "ReadResult",
    "RollbackDetected",
    "SealTampered",
    "SimulatedCrash",
    "TrustedCore",
    "VerificationFailed",
    "WalMismatch",
    "state_hash",
    "wal_fold",
    "wal_step",
]
