"""Helpers shared across the primary test modules."""

from __future__ import annotations

from trapbench import traps


def run_to_main(t, meta):
    """Arm, hit, and consume a breakpoint at main; pc left at main."""
    bp = traps.arm_sw_breakpoint(t, meta.main_addr)
    ev = t.resume_wait()
    assert ev.pc == meta.main_addr + 1, ev
    rf = t.get_gp_registers()
    rf.pc = meta.main_addr
    t.set_gp_registers(rf)
    traps.disarm_sw_breakpoint(t, bp)


def read_stdout(t) -> bytes:
    with open(t.stdout_path, "rb") as f:
        return f.read()
