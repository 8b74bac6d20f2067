import math
import random
from collections import Counter

import pytest

from authlsm.core import CoreConfig, TrustedCore
from authlsm.record import Record
from authlsm.workload import (
    InvalidSpec,
    ShadowOracle,
    WorkloadSpec,
    ZipfianGenerator,
    generate,
    make_key,
    run_bench,
    temporal_order_violations,
)


def _core(tmp_path, **kw):
    kw.setdefault("q", 4)
    kw.setdefault("l0_capacity", 16 * 1024)
    kw.setdefault("growth_factor", 4)
    return TrustedCore.open(tmp_path / "s", CoreConfig(**kw))


def test_keys_are_sixteen_bytes():
    assert make_key(42) == b"user000000000042"
    assert len(make_key(10**11)) == 16


def test_read_ratio_zero_is_all_writes():
    ops = list(generate(WorkloadSpec(record_count=50, op_count=200, read_ratio=0.0, seed=1)))
    assert {op.kind for op in ops} == {"put"}
    assert all(len(op.value) == 100 for op in ops)


def test_same_seed_same_stream():
    spec = WorkloadSpec(record_count=100, op_count=500, read_ratio=0.5, seed=9)
    assert list(generate(spec)) == list(generate(spec))
    other = WorkloadSpec(record_count=100, op_count=500, read_ratio=0.5, seed=10)
    assert list(generate(spec)) != list(generate(other))


def test_zipf_head_matches_the_analytic_mass():
    n, draws = 1000, 100_000
    z = ZipfianGenerator(n, rng=random.Random(5))
    counts = Counter(z.next_rank() for _ in range(draws))
    # Independent normalizer: the generalized harmonic number.
    h = sum(1 / k**0.99 for k in range(1, n + 1))
    expected = 1 / h
    assert abs(counts[0] / draws - expected) <= 0.2 * expected
    assert z.mass(0) == pytest.approx(expected)


def test_latest_reads_lean_to_recent_inserts():
    spec = WorkloadSpec(record_count=1000, op_count=5000, read_ratio=0.95, distribution="latest", seed=2)
    ops = list(generate(spec))
    reads = [int(op.key[4:]) for op in ops if op.kind == "get"]
    assert sum(1 for r in reads if r >= 900) > 0.5 * len(reads)


@pytest.mark.parametrize(
    "bad",
    [
        dict(distribution="pareto"),
        dict(read_ratio=1.5),
        dict(record_count=0, op_count=10),
        dict(key_len=5, record_count=100),
    ],
)
def test_invalid_specs(bad):
    with pytest.raises(InvalidSpec):
        list(generate(WorkloadSpec(**bad)))


def test_oracle_versions():
    o = ShadowOracle()
    o.put(b"a", b"1", 1)
    o.put(b"a", b"2", 3)
    o.delete(b"a", 5)
    o.put(b"b", b"x", 4)
    assert o.get(b"a") is None
    assert o.get(b"a", 4) == Record(b"a", b"2", 3)
    assert o.get(b"a", 0) is None
    assert o.scan(b"a", b"z", 4) == [Record(b"a", b"2", 3), Record(b"b", b"x", 4)]


def test_temporal_order_checker_flags_inversions():
    good = {1: [Record(b"k", b"", 9)], 2: [Record(b"k", b"", 3)]}
    bad = {1: [Record(b"k", b"", 2)], 2: [Record(b"k", b"", 3)]}
    assert temporal_order_violations(good) == []
    assert temporal_order_violations(bad) == [(b"k", 1, 2)]


def test_workload_a_analog_is_oracle_consistent(tmp_path):
    core = _core(tmp_path)
    spec = WorkloadSpec(record_count=2000, op_count=3000, read_ratio=0.5, scan_ratio=0.05, seed=4)
    m = run_bench(core, spec, oracle=ShadowOracle())
    assert not m.aborted, m.error
    assert m.oracle_mismatches == 0 and m.verification_failures == 0
    assert m.ops["get"] + m.ops.get("scan", 0) + m.ops["put"] == 3000
    assert m.flushes > 0


def test_read_only_phase_triggers_no_merges(tmp_path):
    core = _core(tmp_path)
    spec = WorkloadSpec(record_count=1500, op_count=2000, read_ratio=1.0, seed=2)
    ops = list(generate(spec))
    for op in ops:
        if op.phase == "load":
            core.put(op.key, op.value)
    before = (core.stats.flushes, core.stats.compactions)
    assert before[0] > 0
    reads = [op for op in ops if op.phase == "run"]
    assert {op.kind for op in reads} == {"get"}
    assert all(core.get(op.key) is not None for op in reads)
    assert (core.stats.flushes, core.stats.compactions) == before


def test_latest_hits_need_fewer_entries_than_uniform(tmp_path):
    def entries(dist, sub):
        core = TrustedCore.open(tmp_path / sub, CoreConfig(q=4, l0_capacity=16 * 1024, growth_factor=4))
        spec = WorkloadSpec(record_count=3000, op_count=3000, read_ratio=0.9, distribution=dist, seed=6)
        m = run_bench(core, spec)
        core.close()
        return m.mean_proof_entries

    assert entries("latest", "a") < entries("uniform", "b")


def test_count_metrics_are_deterministic(tmp_path):
    def once(sub):
        core = TrustedCore.open(tmp_path / sub, CoreConfig(q=4, l0_capacity=8 * 1024, growth_factor=4))
        m = run_bench(core, WorkloadSpec(record_count=500, op_count=800, read_ratio=0.7, scan_ratio=0.1, seed=8))
        core.close()
        return m.count_metrics()

    assert once("a") == once("b")


def test_metrics_text_and_json(tmp_path):
    import json

    core = _core(tmp_path)
    m = run_bench(core, WorkloadSpec(record_count=100, op_count=100, seed=0))
    d = json.loads(m.to_json())
    assert d["ops"] == m.ops
    lines = dict(line.split("=", 1) for line in m.to_text().splitlines())
    assert lines["flushes"] == str(m.flushes)
    assert "latency_p95_ms.get" in lines


def test_path_length_grows_logarithmically():
    from authlsm.merkle import build_level_tree

    sizes = [2**k for k in range(6, 15)]
    lengths = []
    for n in sizes:
        tree = build_level_tree(1, [Record(make_key(i), b"v", 1) for i in range(n)])
        lengths.append(sum(len(tree.path(i)) for i in range(0, n, max(1, n // 64))) / len(range(0, n, max(1, n // 64))))
    # least-squares slope of path length against log2(n) is one hash per doubling
    xs = [math.log2(n) for n in sizes]
    mx, my = sum(xs) / len(xs), sum(lengths) / len(lengths)
    slope = sum((x - mx) * (y - my) for x, y in zip(xs, lengths)) / sum((x - mx) ** 2 for x in xs)
    assert slope == pytest.approx(1.0, abs=0.05)
