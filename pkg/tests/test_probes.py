"""Probe injection: window planning, counting stubs, state preservation,
and clean removal."""

from __future__ import annotations

import os
import struct
import subprocess

import pytest

from trapbench import probes, traps
from trapbench.errors import PcInWindow, StateError, UnsupportedSite
from trapbench.target import StopKind
from trapbench.workload import RAX, RBX, RCX, RDI, RDX, RSI, Assembler, build_elf

from trap_test_helpers import read_stdout


def build_program(path, fill, data=b"\x00" * 64):
    a = Assembler(0x401000)
    fill(a)
    code = a.resolve()
    img = build_elf(code, data, 0x401000, [("main", 0x401000, True)])
    path.write_bytes(img)
    os.chmod(path, 0o755)
    return str(path)


def emit_print_and_exit(a, reg=RAX):
    """Store reg to the data page, write it to stdout, exit 0."""
    a.store_abs(0x403000, reg, 0)
    a.mov_ri(RAX, 1, 0)
    a.mov_ri(RDI, 1, 0)
    a.mov_ri(RSI, 0x403000, 0)
    a.mov_ri(RDX, 4, 0)
    a.syscall(0)
    a.mov_ri(RAX, 60, 0)
    a.mov_ri(RDI, 0, 0)
    a.syscall(0)


class TestPlanning:
    def test_five_byte_single_insn(self, basic_workload, spawn):
        exe, meta = basic_workload
        t = spawn(exe)
        plan = probes.plan_probe_site(t, meta.hot_insn_addr)
        assert plan.displaced_len == 5
        assert plan.insn_boundaries == [5]
        assert plan.displaced_bytes == t.read_memory(meta.hot_insn_addr, 5)

    def test_two_plus_three_byte_window(self, tmp_path, spawn):
        def fill(a):
            a.label("site")
            a.xor_rr(RBX, RBX, 0)       # 2 bytes
            a.dec_r64(RCX, 0)           # 3 bytes
            emit_print_and_exit(a)
        exe = build_program(tmp_path / "w23", fill)
        t = spawn(exe)
        plan = probes.plan_probe_site(t, 0x401000)
        assert plan.displaced_len == 5
        assert plan.insn_boundaries == [2, 5]

    def test_seven_byte_first_insn(self, tmp_path, spawn):
        def fill(a):
            a.load_abs(RBX, 0x403000, 0)   # 7 bytes
            emit_print_and_exit(a)
        exe = build_program(tmp_path / "w7b", fill)
        t = spawn(exe)
        plan = probes.plan_probe_site(t, 0x401000)
        assert plan.displaced_len == 7
        assert plan.insn_boundaries == [7]

    def test_branch_in_window_rejected(self, basic_workload, spawn):
        exe, meta = basic_workload
        t = spawn(exe)
        with pytest.raises(UnsupportedSite):
            probes.plan_probe_site(t, meta.main_addr)     # jmp at main

    def test_pc_relative_rejected(self, tmp_path, spawn):
        def fill(a):
            a._emit(b"\x48\x8b\x05\x00\x10\x00\x00", "load", 0)  # mov rax,[rip+x]
            emit_print_and_exit(a)
        exe = build_program(tmp_path / "wrip", fill)
        t = spawn(exe)
        with pytest.raises(UnsupportedSite):
            probes.plan_probe_site(t, 0x401000)

    def test_undecodable_rejected(self, tmp_path, spawn):
        def fill(a):
            a._emit(b"\x0f\xff\x00\x00\x00", "other", 0)
            emit_print_and_exit(a)
        exe = build_program(tmp_path / "wbad", fill)
        t = spawn(exe)
        with pytest.raises(UnsupportedSite):
            probes.plan_probe_site(t, 0x401000)

    def test_non_executable_rejected(self, basic_workload, spawn):
        exe, meta = basic_workload
        t = spawn(exe)
        with pytest.raises(UnsupportedSite):
            probes.plan_probe_site(t, meta.hot_cell_addr)


class TestInjection:
    def _run_with_probe(self, t, meta):
        ebp = traps.arm_sw_breakpoint(t, meta.exit_addr)
        plan = probes.plan_probe_site(t, meta.hot_insn_addr)
        site = probes.inject_probe(t, plan)
        ev = t.resume_wait()
        assert ev.kind is StopKind.BREAKPOINT_TRAP
        assert ev.pc == meta.exit_addr + 1
        count = probes.read_counter(t, site)
        rf = t.get_gp_registers()
        rf.pc = meta.exit_addr
        t.set_gp_registers(rf)
        traps.disarm_sw_breakpoint(t, ebp)
        return site, count

    def test_counter_matches_analytic(self, make_workload, spawn):
        exe, meta = make_workload(total_instr=8000, k_exec=1000)
        t = spawn(exe)
        _, count = self._run_with_probe(t, meta)
        assert count == 1000
        t.resume_wait()
        assert t.exit_code == 0

    def test_zero_executions(self, make_workload, spawn):
        exe, meta = make_workload(total_instr=2000, k_exec=0)
        t = spawn(exe)
        _, count = self._run_with_probe(t, meta)
        assert count == 0

    def test_transparency(self, make_workload, spawn):
        exe, meta = make_workload(total_instr=5000, k_exec=123, k_read=7,
                                  k_write=3)
        native = subprocess.run([exe], capture_output=True)
        t = spawn(exe)
        self._run_with_probe(t, meta)
        t.resume_wait()
        assert t.exit_code == native.returncode
        assert read_stdout(t) == native.stdout

    def test_site_overwritten_with_jump_and_padding(self, tmp_path, spawn):
        def fill(a):
            a.nop(0)
            a.load_abs(RBX, 0x403000, 0)   # 7-byte window: 5-byte jmp + 2 pads
            emit_print_and_exit(a, RBX)
        exe = build_program(tmp_path / "wpad", fill,
                            data=struct.pack("<Q", 0x11223344))
        t = spawn(exe)
        plan = probes.plan_probe_site(t, 0x401001)
        probes.inject_probe(t, plan)
        patched = t.read_memory(0x401001, 7)
        assert patched[0] == 0xE9
        assert patched[5:7] == b"\xcc\xcc"      # single-byte trap padding
        ev = t.resume_wait()                     # runs through the stub
        assert ev.kind is StopKind.EXITED and t.exit_code == 0
        assert read_stdout(t) == struct.pack("<I", 0x11223344)

    def test_flags_preserved_across_stub(self, tmp_path, spawn):
        """Branch directly after the probed instruction depends on its flags:
        add eax, 0x40000000 wraps every 4th iteration, setting OF/ZF patterns
        that select how often ebx increments."""
        def fill(a):
            a.mov_ri(RCX, 16, 0)
            a.label("loop")
            a.label("hot")
            a.add_eax_imm(0x40000000, 0)        # probe site, writes flags
            a.jnz("skip", 0)                    # taken unless eax wrapped to 0
            a.add_ri(RBX, 1, 0)
            a.label("skip")
            a.dec_r64(RCX, 0)
            a.jnz("loop", 0)
            emit_print_and_exit(a, RBX)
        exe = build_program(tmp_path / "wflags", fill)
        native = subprocess.run([exe], capture_output=True)
        assert native.stdout == struct.pack("<I", 4)    # wraps 4 times in 16

        t = spawn(exe)
        hot = 0x401005
        plan = probes.plan_probe_site(t, hot)
        site = probes.inject_probe(t, plan)
        ev = t.resume_wait()
        assert ev.kind is StopKind.EXITED and t.exit_code == 0
        assert read_stdout(t) == native.stdout

    def test_gp_registers_preserved_across_stub(self, tmp_path, spawn):
        """The probed instruction's neighborhood sums many live registers;
        any stub clobber changes the printed value."""
        def fill(a):
            for reg, val in ((RBX, 7), (RDX, 11), (RSI, 13), (RDI, 17)):
                a.mov_ri(reg, val, 0)
            a.mov_ri(RCX, 5, 0)
            a.label("loop")
            a.label("hot")
            a.add_eax_imm(1, 0)               # probe site
            a.add_rr(RAX, RBX, 0)
            a.add_rr(RAX, RDX, 0)
            a.add_rr(RAX, RSI, 0)
            a.add_rr(RAX, RDI, 0)
            a.dec_r64(RCX, 0)
            a.jnz("loop", 0)
            emit_print_and_exit(a, RAX)
        exe = build_program(tmp_path / "wregs", fill)
        native = subprocess.run([exe], capture_output=True)
        t = spawn(exe)
        probes.inject_probe(t, probes.plan_probe_site(t, 0x40101e))
        t.resume_wait()
        assert t.exit_code == 0
        assert read_stdout(t) == native.stdout

    def test_inject_rejected_when_pc_inside_window(self, make_workload, spawn):
        exe, meta = make_workload(total_instr=2000, k_exec=5)
        t = spawn(exe)
        bp = traps.arm_sw_breakpoint(t, meta.hot_insn_addr)
        t.resume_wait()
        rf = t.get_gp_registers()
        rf.pc = meta.hot_insn_addr
        t.set_gp_registers(rf)
        traps.disarm_sw_breakpoint(t, bp)
        plan = probes.plan_probe_site(t, meta.hot_insn_addr)
        with pytest.raises(PcInWindow):
            probes.inject_probe(t, plan)


class TestRemoval:
    def test_restores_bytes_exactly(self, basic_workload, spawn):
        exe, meta = basic_workload
        t = spawn(exe)
        before = t.read_memory(meta.hot_insn_addr, 16)
        plan = probes.plan_probe_site(t, meta.hot_insn_addr)
        site = probes.inject_probe(t, plan)
        probes.remove_probe(t, site)
        assert t.read_memory(meta.hot_insn_addr, 16) == before
        assert not site.active

    def test_stub_page_unmapped(self, basic_workload, spawn):
        exe, meta = basic_workload
        t = spawn(exe)
        site = probes.inject_probe(
            t, probes.plan_probe_site(t, meta.hot_insn_addr))
        page = site.page_addr
        assert t.find_region(page) is not None
        probes.remove_probe(t, site)
        t.memory_map(refresh=True)
        assert t.find_region(page) is None

    def test_remove_twice_raises(self, basic_workload, spawn):
        exe, meta = basic_workload
        t = spawn(exe)
        site = probes.inject_probe(
            t, probes.plan_probe_site(t, meta.hot_insn_addr))
        probes.remove_probe(t, site)
        with pytest.raises(StateError):
            probes.remove_probe(t, site)

    def test_remove_with_pc_in_window_raises(self, basic_workload, spawn):
        exe, meta = basic_workload
        t = spawn(exe)
        site = probes.inject_probe(
            t, probes.plan_probe_site(t, meta.hot_insn_addr))
        rf = t.get_gp_registers()
        saved_pc = rf.pc
        rf.pc = meta.hot_insn_addr + 2
        t.set_gp_registers(rf)
        with pytest.raises(PcInWindow):
            probes.remove_probe(t, site)
        rf.pc = site.stub_addr + 4
        t.set_gp_registers(rf)
        with pytest.raises(PcInWindow):
            probes.remove_probe(t, site)
        rf.pc = saved_pc
        t.set_gp_registers(rf)
        probes.remove_probe(t, site)

    def test_counter_monotone_nondecreasing(self, make_workload, spawn):
        exe, meta = make_workload(total_instr=4000, k_exec=50)
        t = spawn(exe)
        bp = traps.arm_sw_breakpoint(t, meta.exit_addr)
        site = probes.inject_probe(
            t, probes.plan_probe_site(t, meta.hot_insn_addr))
        last = 0
        # sample the counter at a few breakpoint stops mid-run
        mid = traps.arm_sw_breakpoint(t, meta.main_addr)
        ev = t.resume_wait()
        while ev.kind is not StopKind.EXITED:
            cur = probes.read_counter(t, site)
            assert cur >= last
            last = cur
            b = traps.find_sw_breakpoint(t, ev)
            if b is None:
                break
            traps.handle_sw_hit(t, b)
            if b is bp:
                break
            ev = t.resume_wait()
        assert last == 50 or last == 0 or 0 < last <= 50


def test_armed_idle_probe_near_native(make_workload):
    """Probe armed but never executed: window time stays near one native
    whole-process run (no per-run translation cost)."""
    import time as _time
    from trapbench import harness as _h
    from trapbench import primitives as _pr
    exe, meta = make_workload(total_instr=1_000_000_000, k_exec=0)
    native = _h.native_reference(exe, refresh=True)
    spec = _h.ExperimentSpec(
        spec_id="idle-probe", workload_exe=exe, technique="dpi",
        primitive=_pr.ExecSingle(meta.hot_insn_addr), metadata=meta,
        repetitions=1)
    rec = _h.run_experiment(spec, 0)
    assert rec.event_count == 0
    ratio = rec.wall_ns / native["wall_ns"]
    assert ratio <= 1.05, f"armed-idle probe window {ratio:.3f}x native"
