"""YCSB-style workloads, a shadow oracle, and the benchmark driver."""

from __future__ import annotations

import bisect
import json
import math
import random
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator

from .core import VerificationFailed
from .record import MAX_TS, Record

ZIPF_THETA = 0.99
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class InvalidSpec(ValueError):
    pass


def fnv1a64(n: int) -> int:
    h = _FNV_OFFSET
    for b in n.to_bytes(8, "little"):
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def zeta(n: int, theta: float) -> float:
    return math.fsum(1.0 / (i**theta) for i in range(1, n + 1))


class ZipfianGenerator:
    """Gray et al.'s rejection-free zipfian sampler over ranks 0..n-1 (rank 0 most popular)."""

    def __init__(self, n: int, theta: float = ZIPF_THETA, rng: random.Random | None = None):
        if n < 1:
            raise InvalidSpec("zipfian needs at least one item")
        self.n = n
        self.theta = theta
        self.rng = rng or random.Random(0)
        self.zetan = zeta(n, theta)
        self._zeta2 = zeta(2, theta)
        self.alpha = 1.0 / (1.0 - theta)
        self.eta = (1 - (2.0 / n) ** (1 - theta)) / (1 - self._zeta2 / self.zetan)

    def grow(self, n: int) -> None:
        """Extend to ``n`` items, updating the normalizer incrementally."""
        if n > self.n:
            self.zetan += math.fsum(1.0 / (i**self.theta) for i in range(self.n + 1, n + 1))
            self.n = n
            self.eta = (1 - (2.0 / n) ** (1 - self.theta)) / (1 - self._zeta2 / self.zetan)

    def next_rank(self) -> int:
        u = self.rng.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < 1.0 + 0.5**self.theta:
            return 1
        return min(self.n - 1, int(self.n * (self.eta * u - self.eta + 1) ** self.alpha))

    def mass(self, rank: int) -> float:
        """Analytic probability of ``rank``."""
        return 1.0 / ((rank + 1) ** self.theta * self.zetan)


@dataclass
class WorkloadSpec:
    record_count: int = 1000
    op_count: int = 1000
    read_ratio: float = 0.5
    distribution: str = "zipfian"  # uniform | zipfian | latest
    key_len: int = 16
    value_len: int = 100
    scan_ratio: float = 0.0  # share of reads issued as scans
    scan_length: int = 10
    delete_ratio: float = 0.0  # share of writes issued as deletes
    seed: int = 0

    def validate(self) -> None:
        if self.distribution not in ("uniform", "zipfian", "latest"):
            raise InvalidSpec(f"unknown distribution {self.distribution!r}")
        for name in ("read_ratio", "scan_ratio", "delete_ratio"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidSpec(f"{name} must be in [0, 1]")
        if self.key_len < 5 or self.record_count < 0 or self.op_count < 0 or self.value_len < 0:
            raise InvalidSpec("key_len >= 5 and non-negative counts required")
        if self.op_count and self.record_count == 0 and self.distribution != "latest":
            raise InvalidSpec("reads and updates need a loaded keyspace")
        if self.record_count > 10 ** (self.key_len - 4):
            raise InvalidSpec("key_len too short for record_count")


@dataclass(frozen=True)
class Op:
    kind: str  # put | delete | get | scan
    key: bytes
    value: bytes = b""
    end_key: bytes = b""
    phase: str = "run"  # load | run


def make_key(n: int, key_len: int = 16) -> bytes:
    return b"user" + str(n).zfill(key_len - 4).encode()


def generate(spec: WorkloadSpec) -> Iterator[Op]:
    """Load phase of ``record_count`` puts, then ``op_count`` mixed operations."""
    spec.validate()
    rng = random.Random(spec.seed)
    for n in range(spec.record_count):
        yield Op("put", make_key(n, spec.key_len), rng.randbytes(spec.value_len), phase="load")
    inserted = spec.record_count
    zipf = None
    if spec.distribution in ("zipfian", "latest") and inserted:
        zipf = ZipfianGenerator(inserted, rng=rng)

    def pick() -> int:
        if spec.distribution == "uniform":
            return rng.randrange(inserted)
        if spec.distribution == "latest":
            zipf.grow(inserted)
            return inserted - 1 - zipf.next_rank()
        return fnv1a64(zipf.next_rank()) % inserted  # scrambled zipfian

    for _ in range(spec.op_count):
        if rng.random() < spec.read_ratio and inserted:
            n = pick()
            if rng.random() < spec.scan_ratio:
                hi = min(inserted - 1, n + rng.randrange(1, spec.scan_length + 1))
                yield Op("scan", make_key(n, spec.key_len), end_key=make_key(hi, spec.key_len))
            else:
                yield Op("get", make_key(n, spec.key_len))
            continue
        if spec.distribution == "latest" or not inserted:
            if zipf is None:
                zipf = ZipfianGenerator(1, rng=rng)
            n = inserted
            inserted += 1
            yield Op("put", make_key(n, spec.key_len), rng.randbytes(spec.value_len))
            continue
        n = pick()
        if rng.random() < spec.delete_ratio:
            yield Op("delete", make_key(n, spec.key_len))
        else:
            yield Op("put", make_key(n, spec.key_len), rng.randbytes(spec.value_len))


class ShadowOracle:
    """Plain replay map with every version of every key."""

    def __init__(self) -> None:
        self.versions: dict[bytes, list[tuple[int, bytes | None]]] = {}  # ascending ts

    def apply(self, key: bytes, value: bytes | None, ts: int) -> None:
        self.versions.setdefault(key, []).append((ts, value))

    def put(self, key: bytes, value: bytes, ts: int) -> None:
        self.apply(key, value, ts)

    def delete(self, key: bytes, ts: int) -> None:
        self.apply(key, None, ts)

    def _visible(self, key: bytes, ts_q: int) -> tuple[int, bytes | None] | None:
        vs = self.versions.get(key)
        if not vs:
            return None
        i = bisect.bisect_right(vs, ts_q, key=lambda v: v[0])
        return vs[i - 1] if i else None

    def get(self, key: bytes, ts_q: int = MAX_TS) -> Record | None:
        v = self._visible(key, ts_q)
        if v is None or v[1] is None:
            return None
        return Record(key, v[1], v[0])

    def scan(self, k1: bytes, k2: bytes, ts_q: int = MAX_TS) -> list[Record]:
        out = []
        for k in sorted(k for k in self.versions if k1 <= k <= k2):
            r = self.get(k, ts_q)
            if r is not None:
                out.append(r)
        return out


@dataclass
class Metrics:
    ops: dict[str, int] = field(default_factory=dict)
    latency_mean_ms: dict[str, float] = field(default_factory=dict)
    latency_p95_ms: dict[str, float] = field(default_factory=dict)
    ops_per_sec: float = 0.0
    store_reads: int = 0
    mean_proof_entries: float = 0.0
    mean_proof_hashes: float = 0.0
    mean_proof_bytes: float = 0.0
    flushes: int = 0
    compactions: int = 0
    verified_bytes: int = 0
    verification_failures: int = 0
    oracle_mismatches: int = 0
    aborted: bool = False
    error: str = ""

    def count_metrics(self) -> dict:
        """The seed-determined part of the metrics (everything but timings)."""
        d = asdict(self)
        for k in ("latency_mean_ms", "latency_p95_ms", "ops_per_sec"):
            d.pop(k)
        return d

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = []
        for k, v in sorted(asdict(self).items()):
            if isinstance(v, dict):
                lines.extend(f"{k}.{sub}={val:.4f}" if isinstance(val, float) else f"{k}.{sub}={val}" for sub, val in sorted(v.items()))
            elif isinstance(v, float):
                lines.append(f"{k}={v:.4f}")
            else:
                lines.append(f"{k}={v}")
        return "\n".join(lines)


def _p95(xs: list[float]) -> float:
    xs = sorted(xs)
    return xs[min(len(xs) - 1, math.ceil(0.95 * len(xs)) - 1)] if xs else 0.0


def run_bench(core, spec: WorkloadSpec, *, oracle: ShadowOracle | None = None, include_load: bool = False) -> Metrics:
    """Drive ``spec`` through ``core``; with an ``oracle`` every read is cross-checked.

    Store errors abort the run; the metrics gathered so far are returned with
    ``aborted`` set.
    """
    m = Metrics()
    lat: dict[str, list[float]] = {}
    entries = hashes = pbytes = 0
    f0, c0, v0 = core.stats.flushes, core.stats.compactions, core.stats.verified_bytes
    clock = time.perf_counter
    start = clock()
    counted = 0
    try:
        for op in generate(spec):
            timed = include_load or op.phase == "run"
            t = clock()
            if op.kind == "put":
                ts = core.put(op.key, op.value)
                if oracle is not None:
                    oracle.put(op.key, op.value, ts)
            elif op.kind == "delete":
                ts = core.delete(op.key)
                if oracle is not None:
                    oracle.delete(op.key, ts)
            elif op.kind == "get":
                res = core.lookup(op.key, measure=True)
                if res.source == "store":
                    m.store_reads += 1
                    entries += res.entries
                    hashes += res.hash_count
                    pbytes += res.proof_bytes
                if oracle is not None and res.record != oracle.get(op.key):
                    m.oracle_mismatches += 1
            else:
                got = core.scan(op.key, op.end_key)
                if oracle is not None and got != oracle.scan(op.key, op.end_key):
                    m.oracle_mismatches += 1
            if timed:
                lat.setdefault(op.kind, []).append((clock() - t) * 1000)
                counted += 1
    except VerificationFailed as exc:
        m.verification_failures += 1
        m.aborted, m.error = True, str(exc)
    except Exception as exc:  # surfaced in the metrics rather than lost
        m.aborted, m.error = True, f"{type(exc).__name__}: {exc}"
    elapsed = clock() - start
    m.ops = {k: len(v) for k, v in sorted(lat.items())}
    m.latency_mean_ms = {k: sum(v) / len(v) for k, v in sorted(lat.items())}
    m.latency_p95_ms = {k: _p95(v) for k, v in sorted(lat.items())}
    m.ops_per_sec = counted / elapsed if elapsed > 0 else 0.0
    if m.store_reads:
        m.mean_proof_entries = entries / m.store_reads
        m.mean_proof_hashes = hashes / m.store_reads
        m.mean_proof_bytes = pbytes / m.store_reads
    m.flushes = core.stats.flushes - f0
    m.compactions = core.stats.compactions - c0
    m.verified_bytes = core.stats.verified_bytes - v0
    return m


def temporal_order_violations(levels: dict[int, list[Record]]) -> list[tuple[bytes, int, int]]:
    """Every (key, i, j) with i < j where some version at level i is not newer than one at level j."""
    span: dict[bytes, dict[int, tuple[int, int]]] = {}
    for lvl, records in levels.items():
        for r in records:
            d = span.setdefault(r.key, {})
            lo, hi = d.get(lvl, (r.ts, r.ts))
            d[lvl] = (min(lo, r.ts), max(hi, r.ts))
    bad = []
    for key, d in span.items():
        lv = sorted(d)
        for a in range(len(lv)):
            for b in range(a + 1, len(lv)):
                if d[lv[a]][0] <= d[lv[b]][1]:
                    bad.append((key, lv[a], lv[b]))
    return bad
