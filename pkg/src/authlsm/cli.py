"""Command-line entry point.

Output is one line per item, each a space-separated list of ``field=value``
pairs with values percent-encoded, so any output line parses back with
``parse_line``. Exit codes: 0 ok, 1 usage, 2 I/O or container damage,
3 verification failure, 4 rollback detected.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from urllib.parse import quote_from_bytes, unquote_to_bytes

from .adversary import RESPONSE_KINDS, Attack, AttackKind, SelectorUnresolvable, inject, run_campaign
from .core import (
    DEFAULT_SEAL_KEY,
    CoreConfig,
    CounterIoError,
    RollbackDetected,
    SealTampered,
    TrustedCore,
    VerificationFailed,
    WalMismatch,
)
from .record import MAX_TS, Record
from .store import StoreError, StoreLocked

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VERIFY, EXIT_ROLLBACK = 0, 1, 2, 3, 4
CONFIG_NAME = "config.json"


def demo_levels() -> dict[int, list[Record]]:
    """The three-level worked example: A at L1; T and two Z versions at L2; older A, T, Y, Z at L3."""

    def r(k, ts):
        return Record(k.encode(), f"{k}{ts}".encode(), ts)

    return {1: [r("A", 9)], 2: [r("T", 4), r("Z", 7), r("Z", 6)], 3: [r("A", 2), r("T", 0), r("Y", 3), r("Z", 1)]}


# ---------------------------------------------------------------- output format


def _fmt(v) -> str:
    if isinstance(v, bytes):
        return quote_from_bytes(v, safe="")
    if isinstance(v, bool):
        return "1" if v else "0"
    if v is None:
        return "-"
    return quote_from_bytes(str(v).encode(), safe="")


def format_line(**pairs) -> str:
    return " ".join(f"{k}={_fmt(v)}" for k, v in pairs.items())


def parse_line(line: str) -> dict[str, bytes]:
    out = {}
    for tok in line.split():
        k, sep, v = tok.partition("=")
        if not sep:
            raise ValueError(f"bad token {tok!r}")
        out[k] = unquote_to_bytes(v)
    return out


def _record_line(r: Record, **extra) -> str:
    return format_line(key=r.key, value=r.value, ts=r.ts, **extra)


# ---------------------------------------------------------------- config


def save_config(store: Path, cfg: CoreConfig) -> None:
    d = asdict(cfg)
    d["seal_key"] = cfg.seal_key.hex()
    (store / CONFIG_NAME).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def load_config(store: Path) -> CoreConfig:
    p = store / CONFIG_NAME
    if not p.exists():
        raise FileNotFoundError(f"{p} missing; run init first")
    d = json.loads(p.read_text())
    known = {f.name for f in fields(CoreConfig)}
    d = {k: v for k, v in d.items() if k in known}
    if "seal_key" in d:
        d["seal_key"] = bytes.fromhex(d["seal_key"])
    return CoreConfig(**d)


# ---------------------------------------------------------------- commands


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ts(s: str) -> int:
    v = int(s)
    if not 0 <= v <= MAX_TS:
        raise argparse.ArgumentTypeError("timestamp out of u64 range")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="authlsm", description="Authenticated LSM store with a simulated trusted core.")
    p.add_argument("-s", "--store", default="store", help="store directory (default: ./store)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("init", help="create a store and its config file")
    s.add_argument("--q", type=int, default=7, help="number of on-disk levels")
    s.add_argument("--l0-capacity", type=int, default=4 * 1024 * 1024)
    s.add_argument("--growth-factor", type=int, default=10)
    s.add_argument("--bind-interval", type=int, default=64)
    s.add_argument("--retention", choices=("all", "latest"), default="all")
    s.add_argument("--seal-key", default=DEFAULT_SEAL_KEY.hex(), help="hex MAC key for sealed state")
    s.add_argument("--counter", default=None, help="counter file (default: <store>.counter)")
    s.add_argument("--demo", action="store_true", help="load the three-level worked example (forces --q 3)")

    s = sub.add_parser("put")
    s.add_argument("key")
    s.add_argument("value")
    s = sub.add_parser("del")
    s.add_argument("key")
    for name in ("get", "scan"):
        s = sub.add_parser(name)
        s.add_argument("key")
        if name == "scan":
            s.add_argument("end_key")
        s.add_argument("--ts", type=_ts, default=MAX_TS, help="read as of this timestamp")
        s.add_argument(
            "--attack",
            default=None,
            choices=sorted(k.value for k in RESPONSE_KINDS),
            help="serve the read through a response attack (store files are left alone)",
        )
    sub.add_parser("flush")
    s = sub.add_parser("compact")
    s.add_argument("level", type=int)

    s = sub.add_parser("bench", help="run a seeded workload against the store")
    s.add_argument("--records", type=int, default=1000)
    s.add_argument("--ops", type=int, default=1000)
    s.add_argument("--read-ratio", type=float, default=0.5)
    s.add_argument("--scan-ratio", type=float, default=0.0)
    s.add_argument("--delete-ratio", type=float, default=0.0)
    s.add_argument("--distribution", choices=("uniform", "zipfian", "latest"), default="zipfian")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--check", action="store_true", help="cross-check reads against a shadow oracle (fresh store only)")
    s.add_argument("--json", default=None, help="also write the metrics summary here")

    s = sub.add_parser("attack", help="run an adversary campaign on scratch copies (the store is untouched)")
    s.add_argument("--kind", action="append", required=True, help="attack kind, repeatable, or 'all'")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)

    sub.add_parser("audit", help="check the store against the monotonic counter")
    sub.add_parser("bind", help="anchor the current state to the monotonic counter")
    sub.add_parser("fsck", help="rebuild every level from its run file and compare with the sealed roots")
    return p


def _open(store: Path, *, audit: bool = True) -> TrustedCore:
    return TrustedCore.open(store, load_config(store), audit=audit, lock=True)


def _cmd_init(args, out) -> int:
    store = Path(args.store)
    if (store / CONFIG_NAME).exists():
        print(f"authlsm: {store} is already initialized", file=sys.stderr)
        return EXIT_USAGE
    q = 3 if args.demo else args.q
    counter = Path(args.counter) if args.counter else store.with_name(store.name + ".counter")
    if counter.exists():
        print(f"authlsm: counter {counter} already exists; a fresh store would read as rolled back", file=sys.stderr)
        return EXIT_USAGE
    cfg = CoreConfig(
        q=q,
        l0_capacity=args.l0_capacity,
        growth_factor=args.growth_factor,
        bind_interval=args.bind_interval,
        retention=args.retention,
        seal_key=bytes.fromhex(args.seal_key),
        counter_path=args.counter,
    )
    store.mkdir(parents=True, exist_ok=True)
    save_config(store, cfg)
    with TrustedCore.open(store, cfg, lock=True) as core:
        if args.demo:
            core.bootstrap_levels(demo_levels(), global_ts=9)
        core.bind_counter()
        out(format_line(store=str(store), q=q, global_ts=core.global_ts))
    return EXIT_OK


def _attacked(core: TrustedCore, kind: str | None, key: bytes):
    if kind is None:
        return
    k = AttackKind(kind)
    level = None
    for lvl in range(1, core.config.q + 1):
        if core.store.trees()[lvl].find(key) is not None:
            level = lvl
            break
    core.store = inject(core.store, Attack(k, key=key, level=level, other_level=(level or 1) % core.config.q + 1))


def run(argv: list[str] | None = None, out=print) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args, out)
    except VerificationFailed as exc:
        out(format_line(error="verification-failed", level=exc.level, reason=exc.reason.value))
        return EXIT_VERIFY
    except (SealTampered, WalMismatch) as exc:
        out(format_line(error=type(exc).__name__, detail=str(exc)))
        return EXIT_VERIFY
    except RollbackDetected as exc:
        out(format_line(error="rollback-detected", detail=str(exc)))
        return EXIT_ROLLBACK
    except (OSError, StoreError, CounterIoError) as exc:
        if isinstance(exc, StoreLocked):
            print(f"authlsm: {exc}", file=sys.stderr)
        out(format_line(error="io", detail=str(exc)))
        return EXIT_IO
    except (ValueError, SelectorUnresolvable) as exc:
        print(f"authlsm: {exc}", file=sys.stderr)
        return EXIT_USAGE


def _dispatch(args, out) -> int:
    store = Path(args.store)
    if args.cmd == "init":
        return _cmd_init(args, out)
    if args.cmd == "attack":
        kinds = list(AttackKind) if "all" in args.kind else [AttackKind(k) for k in args.kind]
        report = run_campaign(kinds, trials=args.trials, seed=args.seed)
        out(report.to_text())
        return EXIT_OK if all(r.passed for r in report.rows) else EXIT_VERIFY
    if args.cmd == "audit":
        with _open(store, audit=False) as core:
            core.audit_rollback()
            out(format_line(audit="ok", counter=core.binding[0]))
        return EXIT_OK

    with _open(store) as core:
        if args.cmd == "put":
            out(format_line(ts=core.put(args.key.encode(), args.value.encode())))
        elif args.cmd == "del":
            out(format_line(ts=core.delete(args.key.encode())))
        elif args.cmd == "get":
            key = args.key.encode()
            _attacked(core, args.attack, key)
            res = core.lookup(key, args.ts, measure=True)
            stats = dict(source=res.source, hit_level=res.hit_level, entries=res.entries, hashes=res.hash_count, proof_bytes=res.proof_bytes)
            if res.record is None:
                out(format_line(key=key, found=False, **stats))
            else:
                out(_record_line(res.record, found=True, **stats))
        elif args.cmd == "scan":
            k1, k2 = args.key.encode(), args.end_key.encode()
            _attacked(core, args.attack, k1)
            records, hashes = core.scan_measured(k1, k2, args.ts)
            out(format_line(count=len(records), hashes=hashes))
            for r in records:
                out(_record_line(r))
        elif args.cmd == "flush":
            if core.buffer:
                core.flush()
            out(format_line(flushed=core.stats.flushes, root1=core.roots[1].hex()))
        elif args.cmd == "compact":
            core.compact(args.level)
            out(format_line(level=args.level, root=core.roots[args.level + 1].hex()))
        elif args.cmd == "bind":
            out(format_line(counter=core.bind_counter()))
        elif args.cmd == "fsck":
            report = core.fsck()
            for lvl, status in report.levels.items():
                out(format_line(level=lvl, status=status, root=core.roots[lvl].hex()))
            return EXIT_OK if report.ok else EXIT_VERIFY
        elif args.cmd == "bench":
            return _cmd_bench(core, args, out)
    return EXIT_OK


def _cmd_bench(core: TrustedCore, args, out) -> int:
    from .workload import ShadowOracle, WorkloadSpec, run_bench

    spec = WorkloadSpec(
        record_count=args.records,
        op_count=args.ops,
        read_ratio=args.read_ratio,
        scan_ratio=args.scan_ratio,
        delete_ratio=args.delete_ratio,
        distribution=args.distribution,
        seed=args.seed,
    )
    oracle = None
    if args.check:
        if core.global_ts:
            raise ValueError("--check needs a fresh store")
        oracle = ShadowOracle()
    m = run_bench(core, spec, oracle=oracle)
    for line in m.to_text().splitlines():
        k, _, v = line.partition("=")
        out(format_line(metric=k, value=v))
    if args.json:
        Path(args.json).write_text(m.to_json() + "\n")
    if m.verification_failures or m.oracle_mismatches:
        return EXIT_VERIFY
    return EXIT_IO if m.aborted else EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
