"""A hostile host: response and file mutations, and a seeded detection campaign.

Response attacks wrap an ``UntrustedStore`` and rewrite what ``serve_get`` /
``serve_scan`` return. The forgeries are built the way a capable adversary
would: proofs are generated honestly over a doctored copy of the level trees,
so they are internally consistent and only the trusted roots can expose them.
File attacks edit run files, WAL frames, or roll the whole store directory
back to an earlier snapshot.
"""

from __future__ import annotations

import random
import shutil
import struct
import tempfile
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from .core import (
    CoreConfig,
    RollbackDetected,
    SealTampered,
    TrustedCore,
    VerificationFailed,
    WalMismatch,
)
from .merkle import LevelTree, RangeProof, build_level_tree, range_proof
from .record import MAX_TS, Record, encode_record
from .store import GetResponse, UntrustedStore, answer_get, answer_scan, read_run, scan_wal_bytes, write_run
from .workload import ShadowOracle, WorkloadSpec, generate

FULL_RANGE = (b"\x00", b"\xff" * 32)


class AttackKind(str, Enum):
    TAMPER_VALUE = "TamperValue"
    STALE_RESULT = "StaleResult"
    OMIT_RECORD = "OmitRecord"
    DROP_LEVEL_ENTRY = "DropLevelEntry"
    FORGE_RANGE_GAP = "ForgeRangeGap"
    CROSS_LEVEL_ROOT_REPLAY = "CrossLevelRootReplay"
    WAL_TAMPER = "WalTamper"
    WAL_TRUNCATE_TAIL = "WalTruncateTail"
    ROLLBACK_SNAPSHOT = "RollbackSnapshot"
    IDENTITY = "Identity"


class Verdict(str, Enum):
    VERIFICATION_FAILED = "VerificationFailed"
    WAL_MISMATCH = "WalMismatch"
    ROLLBACK_DETECTED = "RollbackDetected"
    WINDOWED_LOSS = "WindowedLoss"
    ACCEPTED = "Accepted"  # correct results, no alarm


EXPECTED = {
    AttackKind.TAMPER_VALUE: Verdict.VERIFICATION_FAILED,
    AttackKind.STALE_RESULT: Verdict.VERIFICATION_FAILED,
    AttackKind.OMIT_RECORD: Verdict.VERIFICATION_FAILED,
    AttackKind.DROP_LEVEL_ENTRY: Verdict.VERIFICATION_FAILED,
    AttackKind.FORGE_RANGE_GAP: Verdict.VERIFICATION_FAILED,
    AttackKind.CROSS_LEVEL_ROOT_REPLAY: Verdict.VERIFICATION_FAILED,
    AttackKind.WAL_TAMPER: Verdict.WAL_MISMATCH,
    AttackKind.WAL_TRUNCATE_TAIL: Verdict.WINDOWED_LOSS,
    AttackKind.ROLLBACK_SNAPSHOT: Verdict.ROLLBACK_DETECTED,
    AttackKind.IDENTITY: Verdict.ACCEPTED,
}

RESPONSE_KINDS = {
    AttackKind.STALE_RESULT,
    AttackKind.OMIT_RECORD,
    AttackKind.DROP_LEVEL_ENTRY,
    AttackKind.FORGE_RANGE_GAP,
    AttackKind.CROSS_LEVEL_ROOT_REPLAY,
    AttackKind.IDENTITY,
}


class SelectorUnresolvable(LookupError):
    pass


@dataclass
class Attack:
    kind: AttackKind
    key: bytes | None = None
    level: int | None = None
    other_level: int | None = None  # replay source for CrossLevelRootReplay
    ts: int | None = None  # version selector
    offset: int | None = None  # WAL frame index
    seed: int = 0


def _without(tree: LevelTree, drop) -> LevelTree:
    return build_level_tree(tree.level, [r for r in tree.records() if not drop(r)])


class AdversarialStore:
    """Delegates to an honest store except where the attack says otherwise."""

    def __init__(self, inner: UntrustedStore, attack: Attack):
        self.inner = inner
        self.attack = attack
        self.fired = 0  # how many responses were actually mutated

    def __getattr__(self, name):
        return getattr(self.inner, name)

    # ------------------------------------------------------------ get

    def serve_get(self, key: bytes, ts_q: int = MAX_TS) -> GetResponse:
        a = self.attack
        q = self.inner.q
        if a.kind is AttackKind.STALE_RESULT and key == a.key:
            return self._stale(key, ts_q)
        if a.kind is AttackKind.DROP_LEVEL_ENTRY and key == a.key:
            resp = self.inner.serve_get(key, ts_q)
            drop = (a.level or 1) - 1
            drop = min(drop, len(resp.entries) - 1)
            entries = resp.entries[:drop] + resp.entries[drop + 1 :]
            self.fired += 1
            return GetResponse(entries, resp.hit_level)
        if a.kind is AttackKind.CROSS_LEVEL_ROOT_REPLAY:
            self.fired += 1
            return answer_get(self._replayed(), q, key, ts_q)
        return self.inner.serve_get(key, ts_q)

    def _stale(self, key: bytes, ts_q: int) -> GetResponse:
        trees = self.inner.trees()
        resp = answer_get(trees, self.inner.q, key, ts_q)
        if resp.hit_level is None:
            return resp
        h = resp.hit_level
        tree = trees[h]
        i = tree.find(key)
        fresh, _ = resp.entries[-1]
        pos = tree.leaves[i].chain.index(fresh)
        self.fired += 1
        if pos + 1 < len(tree.leaves[i].chain):
            older = tree.leaves[i].chain[pos + 1]
            return GetResponse(resp.entries[:-1] + [(older, tree.membership_at(i, pos + 1))], h)
        # The older version lives deeper: hide the fresh leaf and answer from the doctored forest.
        doctored = dict(trees)
        doctored[h] = _without(tree, lambda r: r.key == key)
        return answer_get(doctored, self.inner.q, key, ts_q)

    # ------------------------------------------------------------ scan

    def serve_scan(self, k1: bytes, k2: bytes, ts_q: int = MAX_TS) -> list[tuple[int, RangeProof]]:
        a = self.attack
        q = self.inner.q
        if a.kind is AttackKind.OMIT_RECORD and k1 <= a.key <= k2:
            trees = dict(self.inner.trees())
            trees[a.level] = _without(trees[a.level], lambda r: r.key == a.key and r.ts == a.ts)
            self.fired += 1
            return answer_scan(trees, q, k1, k2)
        if a.kind is AttackKind.FORGE_RANGE_GAP and k1 <= a.key <= k2:
            self.fired += 1
            return self._gap(k1, k2)
        if a.kind is AttackKind.DROP_LEVEL_ENTRY and k1 <= a.key <= k2:
            out = self.inner.serve_scan(k1, k2, ts_q)
            self.fired += 1
            return [p for p in out if p[0] != (a.level or 1)]
        if a.kind is AttackKind.CROSS_LEVEL_ROOT_REPLAY:
            self.fired += 1
            return answer_scan(self._replayed(), q, k1, k2)
        return self.inner.serve_scan(k1, k2, ts_q)

    def _gap(self, k1: bytes, k2: bytes) -> list[tuple[int, RangeProof]]:
        """Skip the target leaf, handing its digest over as a sibling so the root still recomputes."""
        a = self.attack
        trees = self.inner.trees()
        out = answer_scan(trees, self.inner.q, k1, k2)
        tree = trees[a.level]
        idx = tree.find(a.key)
        honest = range_proof(tree, k1, k2)
        j = idx - honest.first_index
        leaves = honest.leaves[:j] + honest.leaves[j + 1 :]
        siblings = tuple(sorted(honest.siblings + ((0, idx, tree.layers[0][idx]),)))
        forged = replace(honest, leaves=leaves, siblings=siblings)
        return [(lvl, forged if lvl == a.level else p) for lvl, p in out]

    def _replayed(self) -> dict[int, LevelTree]:
        a = self.attack
        trees = dict(self.inner.trees())
        src = trees[a.other_level]
        trees[a.level] = build_level_tree(a.level, src.records())
        return trees


# ---------------------------------------------------------------- file attacks


def tamper_run_record(store: UntrustedStore, level: int, key: bytes, ts: int) -> Record:
    """Rewrite one record in a run file, leaving the header root and embedded proofs as they were."""
    run = read_run(store.run_path(level))
    for i, r in enumerate(run.records):
        if r.key == key and r.ts == ts:
            break
    else:
        raise SelectorUnresolvable(f"no {key!r}@{ts} at level {level}")
    if r.tombstone:
        forged = Record(r.key, b"\x00", r.ts)
    else:
        v = bytearray(r.value) or bytearray(b"\x00")
        v[0] ^= 0x01
        forged = Record(r.key, bytes(v), r.ts)
    records = list(run.records)
    records[i] = forged
    write_run(store.run_path(level), level, records, run.proofs, run.root)
    store._load(level)
    return forged


def tamper_wal_frame(path: Path, frame: int, fix_crc: bool = True) -> None:
    """Flip a byte inside one WAL frame's record; optionally recompute its checksum."""
    data = bytearray(path.read_bytes())
    frames = scan_wal_bytes(bytes(data)).frames
    if not 0 <= frame < len(frames):
        raise SelectorUnresolvable(f"WAL has {len(frames)} frames, asked for {frame}")
    off, r = frames[frame]
    n = struct.unpack_from("<I", data, off)[0]
    enc = bytearray(encode_record(r))
    enc[-1 if r.value else 4] ^= 0x01  # a value byte, or the first key byte of a tombstone
    data[off + 4 : off + 4 + n] = enc
    if fix_crc:
        struct.pack_into("<I", data, off + 4 + n, zlib.crc32(bytes(enc)))
    path.write_bytes(bytes(data))


def snapshot_dir(store_path: Path, dest: Path) -> Path:
    shutil.copytree(store_path, dest)
    return dest


def restore_dir(snapshot: Path, store_path: Path) -> None:
    shutil.rmtree(store_path)
    shutil.copytree(snapshot, store_path)


def inject(store: UntrustedStore, attack: Attack) -> AdversarialStore:
    """Resolve the attack's selector against the store and return the intercepting wrapper.

    TamperValue edits the run file immediately; WalTamper edits the current
    WAL file and takes effect when the store is next recovered.
    """
    k = attack.kind
    trees = store.trees()
    if k is AttackKind.TAMPER_VALUE:
        tamper_run_record(store, attack.level, attack.key, attack.ts)
    elif k is AttackKind.WAL_TAMPER:
        wals = sorted(store.wal_dir.glob("*.wal"))
        if not wals:
            raise SelectorUnresolvable("no WAL file")
        tamper_wal_frame(wals[-1], attack.offset or 0, fix_crc=attack.seed % 2 == 0)
    elif k in (AttackKind.OMIT_RECORD, AttackKind.FORGE_RANGE_GAP, AttackKind.STALE_RESULT):
        lvl = attack.level
        if lvl is None or lvl not in trees or trees[lvl].find(attack.key) is None:
            raise SelectorUnresolvable(f"{k.value}: {attack.key!r} not at level {lvl}")
    elif k is AttackKind.CROSS_LEVEL_ROOT_REPLAY:
        i, j = attack.level, attack.other_level
        if i not in trees or j not in trees or i == j or trees[i].root == trees[j].root:
            raise SelectorUnresolvable("replay needs two distinct levels with different roots")
    elif k in (AttackKind.WAL_TRUNCATE_TAIL, AttackKind.ROLLBACK_SNAPSHOT):
        raise SelectorUnresolvable(f"{k.value} is a whole-directory scenario; see run_campaign")
    return AdversarialStore(store, attack)


# ---------------------------------------------------------------- campaign


@dataclass
class CampaignRow:
    """Tally for one attack kind.

    ``detected`` counts alarms raised (for Identity these are false alarms),
    ``windowed`` counts undetected losses inside the binding window, and
    ``missed`` counts trials whose outcome differs from the expected verdict.
    ``false_accepts`` is the subset of misses where wrong data was returned.
    """

    kind: str
    trials: int = 0
    detected: int = 0
    windowed: int = 0
    missed: int = 0
    false_accepts: int = 0
    expected: str = ""
    reasons: dict[str, int] = field(default_factory=dict)  # detection reasons, not part of the text table

    @property
    def passed(self) -> bool:
        return self.trials > 0 and self.missed == 0 and self.false_accepts == 0


@dataclass
class CampaignReport:
    rows: list[CampaignRow] = field(default_factory=list)

    HEADER = "kind trials detected windowed missed false_accepts verdict"

    def row(self, kind: AttackKind) -> CampaignRow:
        for r in self.rows:
            if r.kind == AttackKind(kind).value:
                return r
        raise KeyError(kind)

    def to_text(self) -> str:
        lines = [self.HEADER]
        for r in self.rows:
            lines.append(f"{r.kind} {r.trials} {r.detected} {r.windowed} {r.missed} {r.false_accepts} {r.expected}")
        return "\n".join(lines)

    @classmethod
    def parse(cls, text: str) -> CampaignReport:
        lines = text.strip().splitlines()
        if not lines or lines[0] != cls.HEADER:
            raise ValueError("not a campaign report")
        rows = []
        for ln in lines[1:]:
            kind, trials, det, win, missed, fa, verdict = ln.split()
            rows.append(CampaignRow(kind, int(trials), int(det), int(win), int(missed), int(fa), verdict))
        return cls(rows)


@dataclass
class CampaignSetup:
    """Base store parameters; small levels so a few hundred writes spread over several levels."""

    q: int = 4
    l0_capacity: int = 1536
    growth_factor: int = 3
    bind_interval: int = 16
    keys: int = 48
    writes: int = 360
    value_len: int = 24
    delete_ratio: float = 0.1
    seed: int = 7

    def core_config(self, counter_path: Path) -> CoreConfig:
        return CoreConfig(
            q=self.q,
            l0_capacity=self.l0_capacity,
            growth_factor=self.growth_factor,
            bind_interval=self.bind_interval,
            counter_path=str(counter_path),
        )


def _replay(core: TrustedCore, oracle: ShadowOracle, spec: WorkloadSpec) -> None:
    for op in generate(spec):
        if op.kind == "put":
            oracle.put(op.key, op.value, core.put(op.key, op.value))
        elif op.kind == "delete":
            oracle.delete(op.key, core.delete(op.key))


def _base_spec(setup: CampaignSetup, seed: int, writes: int | None = None) -> WorkloadSpec:
    return WorkloadSpec(
        record_count=setup.keys,
        op_count=(writes if writes is not None else setup.writes) - setup.keys,
        read_ratio=0.0,
        distribution="uniform",
        value_len=setup.value_len,
        delete_ratio=setup.delete_ratio,
        seed=seed,
    )


class _Env:
    """One prebuilt base store; trials run on copies so they stay independent."""

    def __init__(self, setup: CampaignSetup, root: Path):
        self.setup = setup
        self.root = root
        self.base = root / "base"
        self.counter = root / "base.counter"
        self.oracle = ShadowOracle()
        core = TrustedCore.open(self.base, setup.core_config(self.counter))
        _replay(core, self.oracle, _base_spec(setup, setup.seed))
        if core.wal_len == 0:  # keep an admitted WAL frame around for WalTamper
            k = b"user000000000000"
            self.oracle.put(k, b"tail", core.put(k, b"tail"))
        self.records = {lvl: core.level_records(lvl) for lvl in range(1, setup.q + 1)}
        self.roots = list(core.roots)
        self.wal_len = core.wal_len
        core.close()
        self._n = 0

    def copy(self) -> tuple[Path, Path]:
        self._n += 1
        d = self.root / f"t{self._n}"
        shutil.copytree(self.base, d)
        shutil.copyfile(self.counter, d.with_name(d.name + ".counter"))
        return d, d.with_name(d.name + ".counter")

    def open(self, path: Path, counter: Path, **kw) -> TrustedCore:
        return TrustedCore.open(path, self.setup.core_config(counter), **kw)

    def store_records(self) -> list[tuple[int, Record]]:
        return [(lvl, r) for lvl, rs in sorted(self.records.items()) for r in rs]


def _check_reads(core: TrustedCore, oracle: ShadowOracle, keys, scans) -> bool:
    """True iff every read matches the oracle (raises on detection)."""
    ok = True
    for key, ts_q in keys:
        ok &= core.get(key, ts_q) == oracle.get(key, ts_q)
    for k1, k2 in scans:
        ok &= core.scan(k1, k2) == oracle.scan(k1, k2)
    return ok


def _trial(env: _Env, kind: AttackKind, rng: random.Random, shared: TrustedCore) -> str:
    """Run one attack; returns "detected", "windowed", "accepted", "missed" or "false-accept"."""
    setup = env.setup
    recs = env.store_records()
    if kind in RESPONSE_KINDS or kind is AttackKind.TAMPER_VALUE:
        honest = shared.store if not isinstance(shared.store, AdversarialStore) else shared.store.inner
        core = shared
        if kind is AttackKind.TAMPER_VALUE:
            path, counter = env.copy()
            core = env.open(path, counter)
            honest = core.store
        lvl, r = rng.choice(recs)
        keys, scans = [], []
        if kind is AttackKind.TAMPER_VALUE:
            attack = Attack(kind, key=r.key, level=lvl, ts=r.ts)
            keys = [(r.key, r.ts)]
        elif kind is AttackKind.STALE_RESULT:
            multi = [(lv, x) for lv, x in recs if sum(1 for _, y in recs if y.key == x.key) > 1]
            lvl, r = rng.choice(multi)
            newest = max(y.ts for _, y in recs if y.key == r.key)
            nlvl = next(lv for lv, y in recs if y.key == r.key and y.ts == newest)
            attack = Attack(kind, key=r.key, level=nlvl)
            keys = [(r.key, newest)]
        elif kind is AttackKind.OMIT_RECORD:
            attack = Attack(kind, key=r.key, level=lvl, ts=r.ts)
            scans = [(r.key, r.key)] if rng.random() < 0.5 else [FULL_RANGE]
        elif kind is AttackKind.FORGE_RANGE_GAP:
            attack = Attack(kind, key=r.key, level=lvl)
            scans = [(r.key, r.key)]
        elif kind is AttackKind.DROP_LEVEL_ENTRY:
            present = rng.random() < 0.7
            key = r.key if present else b"zz-absent-" + bytes([rng.randrange(256)])
            attack = Attack(kind, key=key, level=rng.randrange(1, setup.q + 1))
            if rng.random() < 0.5:
                keys = [(key, r.ts if present else MAX_TS)]  # r.ts keeps the read away from L0
            else:
                scans = [(key, key)]
        elif kind is AttackKind.CROSS_LEVEL_ROOT_REPLAY:
            pairs = [(i, j) for i in range(1, setup.q + 1) for j in range(1, setup.q + 1) if i != j and env.roots[i] != env.roots[j]]
            i, j = rng.choice(pairs)
            attack = Attack(kind, level=i, other_level=j)
            scans = [FULL_RANGE]
        else:
            attack = Attack(AttackKind.IDENTITY)
            keys = [(r.key, MAX_TS), (r.key, r.ts)]
            scans = [(r.key, r.key), FULL_RANGE]
        core.store = inject(honest, attack)
        try:
            ok = _check_reads(core, env.oracle, keys, scans)
        except VerificationFailed as exc:
            return "detected", exc.reason.value
        finally:
            core.store = honest
            if core is not shared:
                core.close()
        if kind is AttackKind.IDENTITY:
            return "accepted" if ok else "false-accept"
        return "missed" if ok else "false-accept"

    path, counter = env.copy()
    if kind is AttackKind.WAL_TAMPER:
        store = UntrustedStore(path, setup.q)
        inject(store, Attack(kind, offset=rng.randrange(env.wal_len), seed=rng.randrange(2)))
        store.close()
        try:
            env.open(path, counter).close()
        except (WalMismatch, SealTampered) as exc:
            return "detected", type(exc).__name__
        return "missed"

    # Whole-directory rollback scenarios.
    oracle = _clone_oracle(env.oracle)
    core = env.open(path, counter)
    window = setup.bind_interval
    extra = _base_spec(setup, rng.randrange(1 << 30), writes=setup.keys + 2 * window)
    ops = [op for op in generate(extra) if op.phase == "run"]
    if kind is AttackKind.ROLLBACK_SNAPSHOT:
        snap = snapshot_dir(path, path.with_name(path.name + ".snap"))
        for op in ops[: rng.randrange(1, len(ops))]:
            _apply(core, oracle, op)
        core.bind_counter()  # at least one binding lands after the snapshot
    else:
        core.bind_counter()
        pre = rng.randrange(window - 2)
        post = rng.randrange(1, window - 1 - pre)  # pre + post < window: no automatic bind
        for op in ops[:pre]:
            _apply(core, oracle, op)
        snap = snapshot_dir(path, path.with_name(path.name + ".snap"))
        for op in ops[pre : pre + post]:
            _apply(core, oracle, op)
    core.close()
    restore_dir(snap, path)
    try:
        core = env.open(path, counter)
    except RollbackDetected:
        return "detected", "RollbackDetected"
    try:
        newest = max(v[-1][0] for v in oracle.versions.values())
        lost = core.global_ts != newest or any(core.get(k) != oracle.get(k) for k in oracle.versions)
    finally:
        core.close()
    if kind is AttackKind.WAL_TRUNCATE_TAIL:
        return "windowed" if lost else "accepted"
    return "false-accept" if lost else "missed"


def _apply(core: TrustedCore, oracle: ShadowOracle, op) -> None:
    if op.kind == "put":
        oracle.put(op.key, op.value, core.put(op.key, op.value))
    elif op.kind == "delete":
        oracle.delete(op.key, core.delete(op.key))


def _clone_oracle(o: ShadowOracle) -> ShadowOracle:
    c = ShadowOracle()
    c.versions = {k: list(v) for k, v in o.versions.items()}
    return c


_SCORE = {
    Verdict.VERIFICATION_FAILED: {"detected"},
    Verdict.WAL_MISMATCH: {"detected"},
    Verdict.ROLLBACK_DETECTED: {"detected"},
    Verdict.WINDOWED_LOSS: {"windowed"},
    Verdict.ACCEPTED: {"accepted"},
}


def run_campaign(
    kinds,
    trials: int = 100,
    seed: int = 0,
    setup: CampaignSetup | None = None,
    workdir: Path | None = None,
) -> CampaignReport:
    """Run ``trials`` seeded targets of each attack kind against copies of one base store."""
    kinds = [AttackKind(k) for k in kinds]
    report = CampaignReport()
    if not kinds:
        return report
    setup = setup or CampaignSetup()
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        env = _Env(setup, Path(tmp))
        shared = env.open(env.base, env.counter)
        try:
            for kind in kinds:
                expected = EXPECTED[kind]
                row = CampaignRow(kind.value, expected=expected.value)
                rng = random.Random(f"{seed}:{kind.value}")
                for _ in range(trials):
                    outcome = _trial(env, kind, rng, shared)
                    if isinstance(outcome, tuple):
                        outcome, reason = outcome
                        row.reasons[reason] = row.reasons.get(reason, 0) + 1
                    row.trials += 1
                    row.detected += outcome == "detected"
                    row.windowed += outcome == "windowed"
                    row.false_accepts += outcome == "false-accept"
                    row.missed += outcome not in _SCORE[expected]
                report.rows.append(row)
        finally:
            shared.close()
    return report
