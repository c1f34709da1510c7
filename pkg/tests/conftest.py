"""Shared fixtures: cached workload builds, target spawning, hw-debug probe."""

from __future__ import annotations

import os

import pytest

from trapbench import traps
from trapbench.errors import HwDebugUnavailable
from trapbench.target import TargetProcess, spawn_stopped
from trapbench.workload import WorkloadParams, emit_workload


@pytest.fixture(scope="session")
def build_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("workloads")


@pytest.fixture(scope="session")
def make_workload(build_dir):
    """Build-once factory: params -> (exe path, metadata)."""
    cache = {}

    def build(**kw):
        key = tuple(sorted(kw.items()))
        if key not in cache:
            params = WorkloadParams(**kw)
            image, meta = emit_workload(params)
            exe = build_dir / f"w{len(cache)}"
            exe.write_bytes(image)
            os.chmod(exe, 0o755)
            cache[key] = (str(exe), meta)
        return cache[key]

    return build


@pytest.fixture(scope="session")
def basic_workload(make_workload):
    """Small general-purpose workload: k_exec=10, 5 reads, 5 writes."""
    return make_workload(total_instr=2000, k_exec=10, k_read=5, k_write=5)


@pytest.fixture
def spawn(tmp_path):
    """Spawn targets that are always reaped at test end."""
    targets: list[TargetProcess] = []
    outs = iter(range(1000))

    def _spawn(exe, stdout_capture=True):
        out = str(tmp_path / f"out{next(outs)}") if stdout_capture else None
        t = spawn_stopped(exe, stdout_path=out)
        t.stdout_path = out
        targets.append(t)
        return t

    yield _spawn
    for t in targets:
        t.reap()


@pytest.fixture(scope="session")
def hw_debug_available(make_workload):
    """Whether this kernel implements debug registers (gVisor does not)."""
    exe, meta = make_workload(total_instr=2000, k_exec=1)
    t = spawn_stopped(exe)
    try:
        slot = traps.arm_hw_slot(t, meta.hot_insn_addr, "exec", 1)
        traps.clear_hw_slot(t, slot)
        return True
    except HwDebugUnavailable:
        return False
    finally:
        t.reap()
