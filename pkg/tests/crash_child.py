"""Run a seeded write workload and SIGKILL this process at a chosen kill point.

usage: crash_child.py STORE SEED POINT OCCURRENCE ACKFILE

After each write returns, the number of acknowledged writes is appended to
ACKFILE. POINT "put:torn" tears the WAL frame being appended before dying.
"""

from __future__ import annotations

import os
import signal
import sys
from pathlib import Path

from authlsm.core import CoreConfig, TrustedCore
from authlsm.workload import WorkloadSpec, generate

CRASH_CONFIG = dict(q=3, l0_capacity=600, growth_factor=2, bind_interval=9)


def crash_ops(seed: int):
    spec = WorkloadSpec(
        record_count=40, op_count=360, read_ratio=0.0, distribution="uniform", value_len=20, delete_ratio=0.1, seed=seed
    )
    return list(generate(spec))


def apply(core, op):
    return core.put(op.key, op.value) if op.kind == "put" else core.delete(op.key)


def main(store, seed, point, occurrence, ackfile):
    core = TrustedCore.open(Path(store), CoreConfig(**CRASH_CONFIG))
    seen = 0
    hook_point = "put:after_wal_append" if point == "put:torn" else point

    def hook(p):
        nonlocal seen
        if p != hook_point:
            return
        seen += 1
        if seen == occurrence:
            if point == "put:torn":
                wal = core.store.wal.path
                data = wal.read_bytes()
                with open(wal, "r+b") as f:
                    f.truncate(len(data) - 7)
            os.kill(os.getpid(), signal.SIGKILL)

    core.set_crash_hook(hook)
    with open(ackfile, "a", buffering=1) as acks:
        for n, op in enumerate(crash_ops(seed), start=1):
            apply(core, op)
            acks.write(f"{n}\n")
    sys.exit(3)  # the kill point was never reached


if __name__ == "__main__":
    main(sys.argv[1], int(sys.argv[2]), sys.argv[3], int(sys.argv[4]), sys.argv[5])
