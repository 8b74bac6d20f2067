import json
import shutil
import subprocess
import sys

import pytest

from authlsm.cli import format_line, load_config, parse_line, run


def cli(store, *argv):
    lines = []
    code = run(["-s", str(store), *argv], out=lines.append)
    return code, lines


@pytest.fixture
def demo(tmp_path):
    store = tmp_path / "s"
    code, _ = cli(store, "init", "--demo")
    assert code == 0
    return store


def test_get_z_golden(demo):
    code, lines = cli(demo, "get", "Z")
    assert code == 0
    assert lines == ["key=Z value=Z7 ts=7 found=1 source=store hit_level=2 entries=2 hashes=2 proof_bytes=149"]


def test_get_absent_golden(demo):
    code, lines = cli(demo, "get", "B")
    assert code == 0
    assert lines == ["key=B found=0 source=store hit_level=- entries=3 hashes=5 proof_bytes=326"]


def test_scan_golden(demo):
    code, lines = cli(demo, "scan", "A", "Z", "--ts", "3")
    assert code == 0
    assert lines == [
        "count=4 hashes=0",
        "key=A value=A2 ts=2",
        "key=T value=T0 ts=0",
        "key=Y value=Y3 ts=3",
        "key=Z value=Z1 ts=1",
    ]


def test_stale_attack_exits_3(demo):
    code, lines = cli(demo, "get", "Z", "--attack", "StaleResult")
    assert code == 3
    assert parse_line(lines[0]) == {"error": b"verification-failed", "level": b"2", "reason": b"StaleResult"}


def test_write_flush_compact_fsck(demo):
    assert cli(demo, "put", "Y", "new value")[1] == ["ts=10"]
    assert cli(demo, "del", "A")[1] == ["ts=11"]
    assert cli(demo, "flush")[0] == 0
    assert cli(demo, "compact", "1")[0] == 0
    code, lines = cli(demo, "get", "Y")
    assert parse_line(lines[0])["value"] == b"new value"
    assert cli(demo, "get", "A")[1][0].startswith("key=A found=0")
    code, lines = cli(demo, "fsck")
    assert code == 0 and all(parse_line(ln)["status"] == b"ok" for ln in lines)


def test_fsck_flags_a_damaged_run(demo):
    from authlsm.adversary import tamper_run_record
    from authlsm.store import UntrustedStore

    tamper_run_record(UntrustedStore(demo, q=3), 3, b"Y", 3)
    code, lines = cli(demo, "fsck")
    assert code == 3
    assert parse_line(lines[2])["status"] == b"root-mismatch"


def test_audit_after_rollback_exits_4(demo, tmp_path):
    shutil.copytree(demo, tmp_path / "snap")
    cli(demo, "put", "K", "v")
    cli(demo, "bind")
    shutil.rmtree(demo)
    shutil.copytree(tmp_path / "snap", demo)
    code, lines = cli(demo, "audit")
    assert code == 4
    assert parse_line(lines[0])["error"] == b"rollback-detected"


def test_audit_ok(demo):
    assert cli(demo, "audit") == (0, ["audit=ok counter=1"])


def test_sealed_tamper_exits_3(demo):
    p = demo / "sealed.bin"
    data = bytearray(p.read_bytes())
    data[5] ^= 1
    p.write_bytes(bytes(data))
    assert cli(demo, "get", "Z")[0] == 3


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        run(["-s", str(tmp_path / "s"), "frobnicate"])
    assert e.value.code == 1
    assert cli(tmp_path / "s", "get", "Z")[0] == 2  # never initialized: no config
    cli(tmp_path / "t", "init")
    assert cli(tmp_path / "t", "init")[0] == 1


def test_config_round_trip_reproduces_roots(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for store in (a, b):
        cli(store, "init", "--q", "4", "--l0-capacity", "2048", "--growth-factor", "3")
        code, _ = cli(store, "bench", "--records", "200", "--ops", "300", "--seed", "5", "--check")
        assert code == 0
    cfg = json.loads((a / "config.json").read_text())
    assert cfg["q"] == 4 and cfg["l0_capacity"] == 2048
    assert load_config(a) == load_config(b)
    assert (a / "sealed.bin").read_bytes() == (b / "sealed.bin").read_bytes()


def test_bench_writes_json(tmp_path):
    store = tmp_path / "s"
    cli(store, "init", "--q", "3", "--l0-capacity", "4096")
    out = tmp_path / "m.json"
    code, lines = cli(store, "bench", "--records", "100", "--ops", "200", "--json", str(out))
    assert code == 0
    metrics = {parse_line(ln)["metric"].decode(): parse_line(ln)["value"] for ln in lines}
    assert metrics["oracle_mismatches"] == b"0"
    assert json.loads(out.read_text())["verification_failures"] == 0


def test_attack_command(tmp_path):
    code, lines = cli(tmp_path / "unused", "attack", "--kind", "StaleResult", "--kind", "WalTamper", "--trials", "3")
    assert code == 0
    assert lines[0].splitlines()[1].split()[:3] == ["StaleResult", "3", "3"]


def test_output_lines_round_trip():
    line = format_line(key=b"a b=c\n\xff", value=b"", ts=3, found=True, hit=None)
    assert parse_line(line) == {"key": b"a b=c\n\xff", "value": b"", "ts": b"3", "found": b"1", "hit": b"-"}


def test_console_script_and_lock(tmp_path):
    store = tmp_path / "s"
    cli(store, "init", "--demo")
    proc = subprocess.run([sys.executable, "-m", "authlsm.cli", "-s", str(store), "get", "Z"], capture_output=True, text=True)
    assert proc.returncode == 0 and "value=Z7" in proc.stdout
    from authlsm.store import UntrustedStore

    holder = UntrustedStore(store, q=3, lock=True)
    proc = subprocess.run([sys.executable, "-m", "authlsm.cli", "-s", str(store), "get", "Z"], capture_output=True, text=True)
    holder.close()
    assert proc.returncode == 2 and "in use" in proc.stderr


def test_file_attacks_are_not_offered_per_read(demo):
    with pytest.raises(SystemExit) as exc:
        cli(demo, "get", "Z", "--attack", "TamperValue")
    assert exc.value.code == 1
    code, lines = cli(demo, "get", "Z")
    assert code == 0 and parse_line(lines[0])["value"] == b"Z7"


def test_unresolvable_attack_selector_is_a_usage_error(demo):
    code, _ = cli(demo, "get", "nope", "--attack", "OmitRecord")
    assert code == 1
