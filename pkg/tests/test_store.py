import os
import struct

import pytest

from authlsm.merkle import EMPTY_ROOT, NonMembershipProof, build_level_tree
from authlsm.record import MAX_TS, Record
from authlsm.store import (
    CorruptContainer,
    CorruptFrame,
    StoreLocked,
    UntrustedStore,
    encode_frame,
    read_run,
    scan_wal_bytes,
)
from authlsm.wire import embedded_proofs

from helpers import WORKED_LEVELS, oracle_root, rec


def _install(store, level, records):
    tree = build_level_tree(level, records)
    store.install_run(level, records, embedded_proofs(tree), tree.root)
    return tree


@pytest.fixture
def worked(tmp_path):
    s = UntrustedStore(tmp_path / "s", q=3)
    for lvl, recs in WORKED_LEVELS.items():
        _install(s, lvl, recs)
    s.commit_runs()
    return s


def test_fresh_directory_is_empty(tmp_path):
    s = UntrustedStore(tmp_path / "s", q=4)
    assert s.levels_present() == []
    assert all(s.claimed_root(i) == EMPTY_ROOT for i in range(1, 5))


def test_install_then_reopen_exposes_levels(worked, tmp_path):
    again = UntrustedStore(tmp_path / "s", q=3)
    assert again.levels_present() == [1, 2, 3]
    for lvl, recs in WORKED_LEVELS.items():
        assert again.claimed_root(lvl) == oracle_root(recs)
        assert [r for r, _ in again.stream_level(lvl)] == recs


def test_bad_magic_is_corrupt_container(worked, tmp_path):
    p = worked.run_path(2)
    data = bytearray(p.read_bytes())
    data[:4] = b"XXXX"
    p.write_bytes(bytes(data))
    with pytest.raises(CorruptContainer):
        UntrustedStore(tmp_path / "s", q=3)


def test_truncated_run_is_corrupt_container(worked):
    p = worked.run_path(3)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(CorruptContainer):
        read_run(p)


def test_run_header_layout(worked):
    data = worked.run_path(2).read_bytes()
    magic, version, level, count = struct.unpack_from("<4sHHQ", data)
    assert (magic, version, level, count) == (b"ELSM", 1, 2, 3)
    assert data[16:48] == oracle_root(WORKED_LEVELS[2])


def test_serve_get_stops_at_first_hit(worked):
    resp = worked.serve_get(b"Z", MAX_TS)
    assert resp.hit_level == 2 and len(resp.entries) == 2
    nm = resp.entries[0]
    assert isinstance(nm, NonMembershipProof)
    assert nm.left.records == (rec("A", 9),) and nm.right is None
    assert resp.entries[1][0] == rec("Z", 7)


def test_serve_get_absent_key_covers_all_levels(worked):
    resp = worked.serve_get(b"B", MAX_TS)
    assert resp.hit_level is None
    assert [e.level for e in resp.entries] == [1, 2, 3]
    l3 = resp.entries[2]
    assert (l3.left.records[0], l3.right.records[0]) == (rec("A", 2), rec("T", 0))


def test_serve_get_on_empty_store_gives_empty_level_proofs(tmp_path):
    resp = UntrustedStore(tmp_path / "s", q=3).serve_get(b"K")
    assert resp.hit_level is None
    assert all(e.empty_level for e in resp.entries)


def test_serve_get_historical_read_skips_future_versions(worked):
    resp = worked.serve_get(b"Z", 5)
    assert resp.hit_level == 3
    assert resp.entries[1][0] is None  # L2 holds only Z versions newer than 5
    assert resp.entries[2][0] == rec("Z", 1)


def test_serve_scan_covers_every_level(worked):
    proofs = worked.serve_scan(b"S", b"U")
    assert [lvl for lvl, _ in proofs] == [1, 2, 3]
    l1 = proofs[0][1]
    assert l1.left_boundary and len(l1.leaves) == 1
    assert [o.records[0] for o in proofs[2][1].leaves] == [rec("A", 2), rec("T", 0), rec("Y", 3)]


def test_serve_scan_empty_store(tmp_path):
    proofs = UntrustedStore(tmp_path / "s", q=2).serve_scan(b"a", b"z")
    assert [p.leaf_count for _, p in proofs] == [0, 0]


def test_install_empty_level(worked):
    worked.install_run(2, [], [], EMPTY_ROOT)
    assert worked.claimed_root(2) == EMPTY_ROOT
    assert list(worked.stream_level(2)) == []


def test_crash_between_temp_write_and_rename_keeps_old_run(worked, tmp_path):
    class Boom(Exception):
        pass

    def hook(point):
        if point == "install:after_temp_write":
            raise Boom

    worked.hook = hook
    merged = sorted(WORKED_LEVELS[2] + WORKED_LEVELS[3], key=lambda r: r.sort_key)
    with pytest.raises(Boom):
        _install(worked, 3, merged)
    again = UntrustedStore(tmp_path / "s", q=3)
    assert [r for r, _ in again.stream_level(3)] == WORKED_LEVELS[3]
    assert not list((tmp_path / "s" / "runs").glob("*.tmp"))


def test_reconcile_restores_previous_run(worked):
    old_root = worked.claimed_root(3)
    _install(worked, 3, [rec("Q", 1)])
    assert worked.reconcile(3, old_root)
    assert worked.claimed_root(3) == old_root
    assert [r for r, _ in worked.stream_level(3)] == WORKED_LEVELS[3]


def test_wal_append_and_stream(tmp_path):
    s = UntrustedStore(tmp_path / "s", q=2)
    s.wal_use_epoch(0, fresh=True)
    a = s.wal_append(rec("Y", 10))
    b = s.wal_append(rec("K", 11))
    assert a < b
    s.close()
    s = UntrustedStore(tmp_path / "s", q=2)
    s.wal_use_epoch(0)
    assert list(s.wal_stream()) == [rec("Y", 10), rec("K", 11)]


def test_empty_wal_streams_nothing(tmp_path):
    s = UntrustedStore(tmp_path / "s", q=2)
    s.wal_use_epoch(0, fresh=True)
    scan = s.wal_scan()
    assert scan.frames == [] and not scan.torn_tail


@pytest.mark.parametrize("cut", range(1, 20))
def test_torn_final_frame_is_reported(cut):
    frames = [encode_frame(rec("K%d" % i, i)) for i in range(3)]
    data = b"".join(frames)
    scan = scan_wal_bytes(data[: len(data) - cut])
    assert scan.records == [rec("K0", 0), rec("K1", 1)]
    assert scan.torn_tail
    assert scan.end == len(frames[0]) + len(frames[1])


def test_checksum_mismatch_is_corrupt_frame():
    data = bytearray(encode_frame(rec("K", 1)) + encode_frame(rec("L", 2)))
    data[6] ^= 0xFF
    with pytest.raises(CorruptFrame) as e:
        scan_wal_bytes(bytes(data))
    assert e.value.offset == 0


def test_wal_frame_layout():
    r = rec("K", 1)
    frame = encode_frame(r)
    n = struct.unpack_from("<I", frame)[0]
    assert n == len(frame) - 8


def test_store_lock_rejects_second_holder(tmp_path):
    holder = UntrustedStore(tmp_path / "s", q=1, lock=True)
    with pytest.raises(StoreLocked):
        UntrustedStore(tmp_path / "s", q=1, lock=True)
    holder.close()
    UntrustedStore(tmp_path / "s", q=1, lock=True).close()


def test_reader_snapshot_survives_install(worked):
    before = worked.trees()
    _install(worked, 2, [rec("M", 20)])
    assert [r for r in before[2].records()] == WORKED_LEVELS[2]
    assert worked.trees()[2].keys == [b"M"]


def test_wal_append_survives_process_kill(tmp_path):
    """The child appends, reports, and is SIGKILLed; the frame must be there."""
    import subprocess
    import sys

    code = (
        "import os, signal, sys\n"
        "from authlsm.store import UntrustedStore\n"
        "from authlsm.record import Record\n"
        f"s = UntrustedStore({str(tmp_path / 's')!r}, q=1)\n"
        "s.wal_use_epoch(0, fresh=True)\n"
        "s.wal_append(Record(b'k', b'v', 1))\n"
        "os.kill(os.getpid(), signal.SIGKILL)\n"
    )
    proc = subprocess.run([sys.executable, "-c", code])
    assert proc.returncode == -9
    s = UntrustedStore(tmp_path / "s", q=1)
    s.wal_use_epoch(0)
    assert list(s.wal_stream()) == [Record(b"k", b"v", 1)]
