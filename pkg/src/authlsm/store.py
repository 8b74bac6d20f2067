"""The untrusted half: run files, the write-ahead log, and proof generation.

Nothing in this module is trusted by the core. The store validates container
framing only; authenticity is established by the core against its roots.

On-disk layout under the store directory::

    runs/L01.run          current run for level 1 (``.prev`` until committed)
    wal/0000000000000003.wal
    sealed.bin            MAC-protected trusted state, opaque to the store

Run file: ``"ELSM" | version u16 | level u16 | record_count u64 | root 32B``
then per record ``rec_len u32 | encode_record | proof_len u32 | proof``.
WAL frame: ``frame_len u32 | encode_record | crc32(encode_record) u32``.
"""

from __future__ import annotations

import fcntl
import logging
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

from .merkle import (
    EMPTY_ROOT,
    KeyAbsent,
    LevelTree,
    NonMembershipProof,
    RangeProof,
    TreeError,
    build_level_tree,
    future_only_proof,
    membership_proof,
    non_membership_proof,
    range_proof,
)
from .record import MAX_TS, Record, RecordError, decode_exact, encode_record
from .wire import encode_entry, encode_range

log = logging.getLogger(__name__)

RUN_MAGIC = b"ELSM"
RUN_VERSION = 1
_RUN_HEADER = struct.Struct("<4sHHQ32s")
_U32 = struct.Struct("<I")


class StoreError(Exception):
    pass


class CorruptContainer(StoreError):
    pass


class CorruptFrame(StoreError):
    def __init__(self, offset: int, msg: str):
        super().__init__(f"corrupt WAL frame at offset {offset}: {msg}")
        self.offset = offset


class StoreLocked(StoreError):
    pass


# ---------------------------------------------------------------- run files


@dataclass
class RunFile:
    path: Path
    level: int
    root: bytes
    records: list[Record]
    proofs: list[bytes]

    @property
    def record_count(self) -> int:
        return len(self.records)


def write_run(path: Path, level: int, records: Sequence[Record], proofs: Sequence[bytes], root: bytes, fsync: bool = False) -> None:
    if len(records) != len(proofs):
        raise ValueError("one embedded proof per record")
    with open(path, "wb") as f:
        f.write(_RUN_HEADER.pack(RUN_MAGIC, RUN_VERSION, level, len(records), root))
        chunk = []
        for r, p in zip(records, proofs):
            enc = encode_record(r)
            chunk.append(_U32.pack(len(enc)) + enc + _U32.pack(len(p)) + p)
            if len(chunk) >= 4096:
                f.write(b"".join(chunk))
                chunk.clear()
        f.write(b"".join(chunk))
        f.flush()
        if fsync:
            os.fsync(f.fileno())


def read_run(path: Path) -> RunFile:
    data = path.read_bytes()
    if len(data) < _RUN_HEADER.size:
        raise CorruptContainer(f"{path}: short header")
    magic, version, level, count, root = _RUN_HEADER.unpack_from(data)
    if magic != RUN_MAGIC:
        raise CorruptContainer(f"{path}: bad magic {magic!r}")
    if version != RUN_VERSION:
        raise CorruptContainer(f"{path}: unsupported version {version}")
    pos = _RUN_HEADER.size
    records, proofs = [], []
    try:
        for _ in range(count):
            (n,) = _U32.unpack_from(data, pos)
            pos += 4
            if pos + n > len(data):
                raise CorruptContainer(f"{path}: truncated record")
            records.append(decode_exact(data[pos : pos + n]))
            pos += n
            (n,) = _U32.unpack_from(data, pos)
            pos += 4
            if pos + n > len(data):
                raise CorruptContainer(f"{path}: truncated proof")
            proofs.append(data[pos : pos + n])
            pos += n
    except (struct.error, RecordError) as exc:
        raise CorruptContainer(f"{path}: {exc}") from None
    if pos != len(data):
        raise CorruptContainer(f"{path}: {len(data) - pos} trailing bytes")
    return RunFile(path, level, root, records, proofs)


# ---------------------------------------------------------------- WAL


@dataclass
class WalScan:
    frames: list[tuple[int, Record]] = field(default_factory=list)
    torn_tail: bool = False
    end: int = 0  # offset just past the last whole frame

    @property
    def records(self) -> list[Record]:
        return [r for _, r in self.frames]


def encode_frame(r: Record) -> bytes:
    enc = encode_record(r)
    return _U32.pack(len(enc)) + enc + _U32.pack(zlib.crc32(enc))


def scan_wal_bytes(data: bytes, start: int = 0) -> WalScan:
    out = WalScan(end=start)
    pos = start
    while pos < len(data):
        if pos + 4 > len(data):
            out.torn_tail = True
            break
        (n,) = _U32.unpack_from(data, pos)
        if pos + 8 + n > len(data):
            out.torn_tail = True
            break
        enc = data[pos + 4 : pos + 4 + n]
        (crc,) = _U32.unpack_from(data, pos + 4 + n)
        if zlib.crc32(enc) != crc:
            raise CorruptFrame(pos, "checksum mismatch")
        try:
            r = decode_exact(enc)
        except RecordError as exc:
            raise CorruptFrame(pos, str(exc)) from None
        out.frames.append((pos, r))
        pos += 8 + n
        out.end = pos
    return out


class WalFile:
    """Append-only frame log. Each append is one unbuffered write, so it survives a process kill."""

    def __init__(self, path: Path, fsync: bool = False):
        self.path = path
        self.fsync = fsync
        self._f = open(path, "ab", buffering=0)

    def append(self, r: Record) -> int:
        offset = self._f.seek(0, os.SEEK_END)
        self._f.write(encode_frame(r))
        if self.fsync:
            os.fsync(self._f.fileno())
        return offset

    def scan(self, from_offset: int = 0) -> WalScan:
        return scan_wal_bytes(self.path.read_bytes(), from_offset)

    def truncate(self, offset: int) -> None:
        self._f.truncate(offset)

    def size(self) -> int:
        return self.path.stat().st_size

    def close(self) -> None:
        self._f.close()


# ---------------------------------------------------------------- responses


@dataclass
class GetResponse:
    """Per-level entries for levels 1..i; each is a NonMembershipProof or (record | None, MembershipProof).

    A ``(None, proof)`` entry opens a chain whose versions are all newer than
    the query timestamp: the key is present at the level but invisible.
    """

    entries: list
    hit_level: int | None

    def wire_size(self) -> int:
        return sum(len(encode_entry(e)) for e in self.entries)

    def hash_count(self) -> int:
        return sum(e.hash_count if isinstance(e, NonMembershipProof) else e[1].hash_count for e in self.entries)


def scan_wire_size(proofs: Sequence[tuple[int, RangeProof]]) -> int:
    return sum(len(encode_range(p)) for _, p in proofs)


def answer_get(trees: dict[int, LevelTree], q: int, key: bytes, ts_q: int = MAX_TS) -> GetResponse:
    """Walk levels 1..q and stop at the first level holding a version visible at ``ts_q``."""
    entries: list = []
    for level in range(1, q + 1):
        t = trees[level]
        if t.find(key) is None:
            entries.append(non_membership_proof(t, key))
            continue
        try:
            entries.append(membership_proof(t, key, ts_q))
            return GetResponse(entries, level)
        except KeyAbsent:
            entries.append((None, future_only_proof(t, key, ts_q)))
    return GetResponse(entries, None)


def answer_scan(trees: dict[int, LevelTree], q: int, k1: bytes, k2: bytes) -> list[tuple[int, RangeProof]]:
    if k1 > k2:
        raise ValueError("k1 > k2")
    return [(level, range_proof(trees[level], k1, k2)) for level in range(1, q + 1)]


# ---------------------------------------------------------------- store


def _atomic_write(path: Path, data: bytes, fsync: bool) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        if fsync:
            os.fsync(f.fileno())
    os.replace(tmp, path)


class UntrustedStore:
    """Persists levels and the WAL; answers queries with proofs.

    Readers take a snapshot of the level trees when a request starts, so an
    install that lands mid-request does not change what that request sees.
    """

    def __init__(self, path: str | os.PathLike, q: int, fsync: bool = False, lock: bool = False):
        self.path = Path(path)
        self.q = q
        self.fsync = fsync
        self.runs_dir = self.path / "runs"
        self.wal_dir = self.path / "wal"
        self.path.mkdir(parents=True, exist_ok=True)
        self.runs_dir.mkdir(exist_ok=True)
        self.wal_dir.mkdir(exist_ok=True)
        self._lock_file = None
        if lock:
            self._acquire_lock()
        self._mutex = threading.RLock()
        self._runs: dict[int, RunFile | None] = {}
        self._trees: dict[int, LevelTree] = {}
        self.hook = None  # crash-injection callback, see TrustedCore
        for tmp in self.runs_dir.glob("*.tmp"):
            tmp.unlink()
        for level in range(1, q + 1):
            self._load(level)
        self.wal: WalFile | None = None
        self.wal_epoch: int | None = None

    @classmethod
    def open(cls, path, q: int = 7, **kw) -> UntrustedStore:
        return cls(path, q, **kw)

    def _acquire_lock(self) -> None:
        f = open(self.path / "LOCK", "a+")
        try:
            fcntl.flock(f, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            f.close()
            raise StoreLocked(f"{self.path} is in use by another process") from None
        self._lock_file = f

    def close(self) -> None:
        if self.wal is not None:
            self.wal.close()
            self.wal = None
        if self._lock_file is not None:
            self._lock_file.close()
            self._lock_file = None

    def _hook(self, point: str) -> None:
        if self.hook is not None:
            self.hook(point)

    # ------------------------------------------------------------ levels

    def run_path(self, level: int) -> Path:
        return self.runs_dir / f"L{level:02d}.run"

    def _prev_path(self, level: int) -> Path:
        return self.runs_dir / f"L{level:02d}.run.prev"

    def _load(self, level: int) -> None:
        p = self.run_path(level)
        run = read_run(p) if p.exists() else None
        if run is not None and run.level != level:
            raise CorruptContainer(f"{p}: header says level {run.level}")
        with self._mutex:
            self._runs[level] = run
            self._trees.pop(level, None)

    def _tree(self, level: int) -> LevelTree:
        t = self._trees.get(level)
        if t is None:
            run = self._runs.get(level)
            try:
                t = build_level_tree(level, run.records if run else ())
            except TreeError as exc:
                raise CorruptContainer(f"level {level}: {exc}") from None
            self._trees[level] = t
        return t

    def _snapshot(self) -> dict[int, LevelTree]:
        with self._mutex:
            return {lvl: self._tree(lvl) for lvl in range(1, self.q + 1)}

    def level_run(self, level: int) -> RunFile | None:
        return self._runs.get(level)

    def claimed_root(self, level: int) -> bytes:
        run = self._runs.get(level)
        return run.root if run else EMPTY_ROOT

    def levels_present(self) -> list[int]:
        return [lvl for lvl, run in sorted(self._runs.items()) if run is not None]

    def trees(self) -> dict[int, LevelTree]:
        """Consistent snapshot of every level's tree."""
        return self._snapshot()

    def serve_get(self, key: bytes, ts_q: int = MAX_TS) -> GetResponse:
        return answer_get(self._snapshot(), self.q, key, ts_q)

    def serve_scan(self, k1: bytes, k2: bytes, ts_q: int = MAX_TS) -> list[tuple[int, RangeProof]]:
        return answer_scan(self._snapshot(), self.q, k1, k2)

    def stream_level(self, level: int) -> Iterator[tuple[Record, int]]:
        run = self._runs.get(level)
        if run is None:
            return
        for r in list(run.records):
            yield r, level

    def install_run(
        self,
        level: int,
        records: Sequence[Record],
        proofs: Sequence[bytes],
        root: bytes,
        tree: LevelTree | None = None,
    ) -> None:
        """Replace a level's run via write-temp-then-rename; the old run is kept as ``.prev`` until commit."""
        path = self.run_path(level)
        tmp = path.with_name(path.name + ".tmp")
        write_run(tmp, level, records, proofs, root, self.fsync)
        self._hook("install:after_temp_write")
        with self._mutex:
            if path.exists():
                os.replace(path, self._prev_path(level))
            os.replace(tmp, path)
            self._runs[level] = RunFile(path, level, root, list(records), list(proofs))
            if tree is not None and tree.root == root:
                self._trees[level] = tree
            else:
                self._trees.pop(level, None)

    def commit_runs(self) -> None:
        for level in range(1, self.q + 1):
            prev = self._prev_path(level)
            if prev.exists():
                prev.unlink()

    def reconcile(self, level: int, root: bytes) -> bool:
        """Pick, between the current and previous run, the one whose header claims ``root``.

        Used after a crash between install and the core committing its new roots.
        Header roots are untrusted; a wrong pick just fails verification later.
        """
        prev = self._prev_path(level)
        if self.claimed_root(level) == root:
            if prev.exists():
                prev.unlink()
            return True
        if prev.exists():
            try:
                prev_root = read_run(prev).root
            except CorruptContainer:
                prev_root = None
            if prev_root == root:
                os.replace(prev, self.run_path(level))
                self._load(level)
                return True
        if root == EMPTY_ROOT:
            # The level had no run before an install that was never committed.
            self.run_path(level).unlink(missing_ok=True)
            self._load(level)
            return True
        return False

    # ------------------------------------------------------------ WAL

    def wal_path(self, epoch: int) -> Path:
        return self.wal_dir / f"{epoch:016d}.wal"

    def wal_use_epoch(self, epoch: int, fresh: bool = False) -> None:
        """Direct appends to the WAL file of ``epoch``; ``fresh`` starts it empty."""
        if self.wal is not None:
            self.wal.close()
        p = self.wal_path(epoch)
        if fresh and p.exists():
            p.unlink()
        self.wal = WalFile(p, self.fsync)
        self.wal_epoch = epoch

    def wal_drop_other_epochs(self) -> None:
        for p in self.wal_dir.glob("*.wal"):
            if p != self.wal_path(self.wal_epoch):
                p.unlink()

    def wal_append(self, r: Record) -> int:
        return self.wal.append(r)

    def wal_scan(self, from_offset: int = 0) -> WalScan:
        return self.wal.scan(from_offset)

    def wal_stream(self, from_offset: int = 0) -> Iterator[Record]:
        yield from self.wal_scan(from_offset).records

    def wal_truncate(self, offset: int) -> None:
        self.wal.truncate(offset)

    # ------------------------------------------------------------ sealed state

    @property
    def sealed_path(self) -> Path:
        return self.path / "sealed.bin"

    def write_sealed(self, blob: bytes) -> None:
        _atomic_write(self.sealed_path, blob, self.fsync)

    def read_sealed(self) -> bytes | None:
        p = self.sealed_path
        return p.read_bytes() if p.exists() else None
