"""Trap-based instrumentation: software/hardware breakpoints, page-fault
access traps, and the single-step driver.

All techniques share transparent resume semantics: the target's code bytes,
page permissions, and architectural state are indistinguishable from a native
run except while a trap is being serviced.  Event counters live on the tracer
side; handlers increment them.

Per-target bookkeeping (armed breakpoints, trap pages, the syscall scratch
page) hangs off the TargetProcess in a _TrapRegistry, so independent targets
never share state.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from enum import Enum

from . import target as target_mod
from .errors import (AlreadyArmed, BadAlignment, BadLength, HwDebugUnavailable,
                     InjectError, MemoryAccessError, NoFreeSlot, NotOurTrap,
                     OverlappingTrap, StateError, WaitError)
from .target import PAGE, State, StopEvent, StopKind, TargetProcess
from .x86 import TRAP_OPCODE, decode_one

SINGLE_STEP_CAP = 2_000_000
PAGE_FAULT_CAP = 200_000

_TRAP_BYTE = bytes([TRAP_OPCODE])

SYS_MMAP, SYS_MPROTECT, SYS_MUNMAP, SYS_GETPID = 9, 10, 11, 39
PROT_READ, PROT_WRITE, PROT_EXEC = 1, 2, 4
MAP_PRIVATE_ANON = 0x22
SCRATCH_HINT = 0x70000000

RFLAGS_RESUME = 1 << 16


@dataclass
class SoftBreakpoint:
    addr: int
    saved_byte: bytes
    armed: bool = True
    hit_count: int = 0


@dataclass
class HwSlot:
    index: int
    addr: int
    kind: str                   # "exec" | "write" | "readwrite"
    length: int                 # 1, 2, 4, 8
    hit_count: int = 0


@dataclass
class PageTrap:
    pages: dict[int, int]       # page base -> original prot bits
    watched_ranges: list[tuple[int, int]]
    access: str                 # "exec" | "readwrite"
    hit_count: int = 0
    fault_total: int = 0
    active: bool = True


@dataclass
class StepReport:
    steps_executed: int
    truncated: bool
    cap: int


class FaultOutcome(Enum):
    COUNTED = "counted"
    TRANSPARENT = "transparent"
    UNRELATED = "unrelated"


@dataclass
class _TrapRegistry:
    sw: dict[int, SoftBreakpoint] = field(default_factory=dict)
    hw: list[HwSlot | None] = field(default_factory=lambda: [None] * 4)
    page_traps: list[PageTrap] = field(default_factory=list)
    scratch_page: int | None = None
    internal_pages: set[int] = field(default_factory=set)


def registry(t: TargetProcess) -> _TrapRegistry:
    reg = getattr(t, "_trap_registry", None)
    if reg is None:
        reg = _TrapRegistry()
        t._trap_registry = reg
    return reg


def _prot_bits(perms: str) -> int:
    bits = 0
    if perms[0] == "r":
        bits |= PROT_READ
    if perms[1] == "w":
        bits |= PROT_WRITE
    if perms[2] == "x":
        bits |= PROT_EXEC
    return bits


# --- syscall-aware single instruction step -----------------------------------

_SYSCALL_INSN = b"\x0f\x05"


def step_instruction(t: TargetProcess, pc: int | None = None,
                     deliver_signal: int = 0) -> StopEvent:
    """Execute exactly one instruction of the target.

    A plain hardware single-step loses the trap flag across a `syscall`
    instruction (the kernel masks TF on entry and some kernels never restore
    it), so stepping a syscall plants a trap byte right after it and resumes
    instead.  Returns the classified stop, normalized to SINGLE_STEP when the
    instruction completed.
    """
    if pc is None:
        pc = t.read_pc()
    try:
        nxt = t.read_memory(pc, 2)
    except MemoryAccessError:
        nxt = b""
    if nxt != _SYSCALL_INSN:
        return t.resume_wait("step", deliver_signal=deliver_signal)

    land = pc + 2
    saved = t.read_memory(land, 1)
    t.write_memory(land, _TRAP_BYTE)
    ev = t.resume_wait("continue", deliver_signal=deliver_signal)
    if t.state.is_stopped:
        t.write_memory(land, saved)
    if ev.kind == StopKind.BREAKPOINT_TRAP and ev.pc == land + 1:
        rf = t.get_gp_registers()
        rf.pc = land
        t.set_gp_registers(rf)
        ev = StopEvent(StopKind.SINGLE_STEP, pc=land, si_code=ev.si_code)
        t.last_event = ev
    return ev


# --- remote syscall injection -------------------------------------------------

def inject_syscall(t: TargetProcess, nr: int, args: tuple[int, ...] = ()) -> int:
    """Run one syscall in the target's context; registers and scratched bytes
    are restored afterwards.  Returns the signed kernel return value.

    The injected sequence is `syscall; int3`: the trap byte gives a
    deterministic stop on kernels that lose the single-step flag across
    syscall entry."""
    if not t.state.is_stopped:
        raise StateError("inject_syscall requires a stopped target")
    if len(args) > 6:
        raise InjectError("syscalls take at most 6 arguments")
    reg = registry(t)
    site = reg.scratch_page
    if site is None:
        rf0 = t.get_gp_registers()
        region = t.find_region(rf0.pc)
        if region is not None and region.executable:
            site = rf0.pc
        else:
            site = next((r.start for r in t.memory_map() if r.executable), None)
        if site is None:
            raise InjectError("no executable page available to host a syscall")

    prearmed = site == reg.scratch_page      # scratch holds syscall;int3 already
    saved_regs = t.get_gp_registers()
    saved_bytes = b"" if prearmed else t.read_memory(site, 3)
    arg_regs = ("rdi", "rsi", "rdx", "r10", "r8", "r9")
    try:
        if not prearmed:
            t.write_memory(site, _SYSCALL_INSN + _TRAP_BYTE)
        rf = t.get_gp_registers()
        rf.pc = site
        rf.rax = nr
        for name, val in zip(arg_regs, args):
            setattr(rf, name, val & 0xFFFFFFFFFFFFFFFF)
        t.set_gp_registers(rf)
        # Raw resume: the only reachable stop is our own trap byte, so the
        # full signal classification is skipped on the happy path.
        t._raw_fresh = False
        target_mod._ptrace(target_mod.PTRACE_CONT, t.pid, 0, 0)
        t.state = State.RUNNING
        try:
            _, status = os.waitpid(t.pid, 0)
        except (OSError, ChildProcessError) as e:
            t.state = State.SIGNALED
            raise WaitError(f"target vanished during injection: {e}") from e
        if (status & 0xFF) == 0x7F and ((status >> 8) & 0xFF) == 5:
            t.state = State.STOPPED
            after = t.get_gp_registers()
            if after.pc != site + 3:
                raise InjectError(
                    f"injected syscall stopped at {after.pc:#x}, "
                    f"expected {site + 3:#x}")
            ret = after.rax
        else:
            ev = t.classify_status(status, "continue")
            raise InjectError(f"injected syscall stopped abnormally: {ev}")
    finally:
        if t.state.is_stopped:
            if not prearmed:
                t.write_memory(site, saved_bytes)
            t.set_gp_registers(saved_regs)
    if ret >= 1 << 63:
        ret -= 1 << 64
    return ret


def ensure_scratch_page(t: TargetProcess) -> int:
    """Map one r-x page in the target for hosting injected syscalls.

    Created while the image's own pages are still intact, so later page traps
    can strip any program page without losing the injection site."""
    reg = registry(t)
    if reg.scratch_page is None:
        ret = inject_syscall(t, SYS_MMAP,
                             (SCRATCH_HINT, PAGE, PROT_READ | PROT_EXEC,
                              MAP_PRIVATE_ANON, 0xFFFFFFFFFFFFFFFF, 0))
        if ret < 0:
            raise InjectError(f"scratch mmap failed with errno {-ret}")
        t.write_memory(ret, _SYSCALL_INSN + _TRAP_BYTE)   # pre-armed injection site
        reg.scratch_page = ret
        reg.internal_pages.add(ret)
        t.invalidate_memory_map()
    return reg.scratch_page


def remote_mprotect(t: TargetProcess, addr: int, length: int, prot: int) -> int:
    ret = inject_syscall(t, SYS_MPROTECT, (addr, length, prot))
    t.invalidate_memory_map()
    return ret


# --- software breakpoints -------------------------------------------------------

def arm_sw_breakpoint(t: TargetProcess, addr: int) -> SoftBreakpoint:
    reg = registry(t)
    if addr in reg.sw:
        raise AlreadyArmed(f"breakpoint already armed at {addr:#x}")
    page = addr & ~(PAGE - 1)
    for trap in reg.page_traps:
        if trap.active and page in trap.pages:
            raise OverlappingTrap(f"page {page:#x} carries a page trap")
    region = t.find_region(addr)
    if region is None:
        raise MemoryAccessError(f"{addr:#x} is not mapped")
    if not region.executable:
        raise MemoryAccessError(f"{addr:#x} is not executable")
    saved = t.read_memory(addr, 1)
    t.write_memory(addr, _TRAP_BYTE)
    bp = SoftBreakpoint(addr=addr, saved_byte=saved)
    reg.sw[addr] = bp
    return bp


def disarm_sw_breakpoint(t: TargetProcess, bp: SoftBreakpoint) -> None:
    if not bp.armed:
        raise StateError(f"breakpoint at {bp.addr:#x} is not armed")
    if t.state.is_stopped:
        t.write_memory(bp.addr, bp.saved_byte)
    bp.armed = False
    registry(t).sw.pop(bp.addr, None)


def find_sw_breakpoint(t: TargetProcess, ev: StopEvent) -> SoftBreakpoint | None:
    """Owner of a breakpoint trap, if any (trap pc is one past the opcode)."""
    if ev.kind != StopKind.BREAKPOINT_TRAP or ev.pc is None:
        return None
    return registry(t).sw.get(ev.pc - 1)


def handle_sw_hit(t: TargetProcess, bp: SoftBreakpoint) -> None:
    """Roll back pc, restore the original byte, step it, re-arm, count."""
    ev = t.last_event
    if (ev is None or ev.kind != StopKind.BREAKPOINT_TRAP
            or ev.pc != bp.addr + 1 or not bp.armed):
        raise NotOurTrap(
            f"stop is not a trap of the breakpoint at {bp.addr:#x}")
    rf = t.get_gp_registers()
    rf.pc = bp.addr
    t.set_gp_registers(rf)
    t.write_memory(bp.addr, bp.saved_byte)
    ev2 = step_instruction(t, pc=bp.addr)
    bp.hit_count += 1
    if ev2.kind == StopKind.EXITED:
        bp.armed = False
        registry(t).sw.pop(bp.addr, None)
        return
    t.write_memory(bp.addr, _TRAP_BYTE)


# --- hardware breakpoints and watchpoints ---------------------------------------

_DR7_RW = {"exec": 0b00, "write": 0b01, "readwrite": 0b11}
_DR7_LEN = {1: 0b00, 2: 0b01, 4: 0b11, 8: 0b10}


def dr7_word(slots: list[HwSlot | None]) -> int:
    """DR7 control word enabling the occupied slots (local enable bits)."""
    word = 0
    for i, slot in enumerate(slots):
        if slot is None:
            continue
        word |= 1 << (2 * i)
        word |= _DR7_RW[slot.kind] << (16 + 4 * i)
        word |= _DR7_LEN[slot.length] << (18 + 4 * i)
    return word


def validate_hw_request(addr: int, kind: str, length: int) -> None:
    if kind not in _DR7_RW:
        raise BadLength(f"unknown watch kind {kind!r}")
    if kind == "exec":
        if length != 1:
            raise BadLength("execution slots require length 1")
    elif length not in (1, 2, 4, 8):
        raise BadLength(f"watch length must be 1/2/4/8, not {length}")
    if addr % length != 0:
        raise BadAlignment(f"{addr:#x} is not {length}-byte aligned")


def _commit_debug_regs(t: TargetProcess, slots: list[HwSlot | None]) -> None:
    for i, slot in enumerate(slots):
        if slot is not None:
            t._poke_debugreg(i, slot.addr)
    word = dr7_word(slots)
    t._poke_debugreg(7, word)
    if t._peek_debugreg(7) != word:
        t._poke_debugreg(7, 0)
        raise HwDebugUnavailable(
            "this kernel accepts but does not implement debug registers "
            "(DR7 write did not stick); hardware breakpoints cannot fire")
    for i, slot in enumerate(slots):
        if slot is not None and t._peek_debugreg(i) != slot.addr:
            t._poke_debugreg(7, 0)
            raise HwDebugUnavailable(
                f"DR{i} readback mismatch; hardware breakpoints unavailable")


def arm_hw_slot(t: TargetProcess, addr: int, kind: str, length: int = 1) -> HwSlot:
    validate_hw_request(addr, kind, length)
    reg = registry(t)
    index = next((i for i, s in enumerate(reg.hw) if s is None), None)
    if index is None:
        raise NoFreeSlot("all four debug register slots are armed")
    slot = HwSlot(index=index, addr=addr, kind=kind, length=length)
    reg.hw[index] = slot
    try:
        _commit_debug_regs(t, reg.hw)
    except Exception:
        reg.hw[index] = None
        raise
    return slot


def clear_hw_slot(t: TargetProcess, slot: HwSlot) -> None:
    reg = registry(t)
    if reg.hw[slot.index] is not slot:
        raise StateError(f"slot {slot.index} is not armed with this watch")
    reg.hw[slot.index] = None
    if t.state.is_stopped:
        t._poke_debugreg(7, dr7_word(reg.hw))


def handle_hw_hit(t: TargetProcess) -> list[HwSlot]:
    """Attribute a debug trap via DR6, count, and prepare a clean resume."""
    reg = registry(t)
    dr6 = t._peek_debugreg(6)
    fired = [reg.hw[i] for i in range(4)
             if (dr6 & (1 << i)) and reg.hw[i] is not None]
    if not fired:
        raise NotOurTrap("debug trap with no armed slot in DR6")
    t._poke_debugreg(6, 0)
    for slot in fired:
        slot.hit_count += 1
    if any(s.kind == "exec" for s in fired):
        rf = t.get_gp_registers()
        rf.flags |= RFLAGS_RESUME
        t.set_gp_registers(rf)
    return fired


# --- page-fault access traps ------------------------------------------------------

def protect_range(t: TargetProcess, lo: int, hi: int, access: str) -> PageTrap:
    """Strip permissions from every page overlapping [lo, hi).

    access="exec" removes execute only; access="readwrite" removes both data
    permissions.  The watched range keeps its sub-page bounds for filtering.
    """
    if access not in ("exec", "readwrite"):
        raise ValueError(f"access must be exec or readwrite, not {access!r}")
    if lo >= hi:
        raise MemoryAccessError(f"empty range [{lo:#x}, {hi:#x})")
    reg = registry(t)
    pages = list(range(lo & ~(PAGE - 1), ((hi - 1) & ~(PAGE - 1)) + 1, PAGE))
    for page in pages:
        if page in reg.internal_pages:
            raise OverlappingTrap(f"page {page:#x} is toolkit-internal")
        for trap in reg.page_traps:
            if trap.active and page in trap.pages:
                raise OverlappingTrap(f"page {page:#x} already carries a trap")
        for bp_addr in reg.sw:
            if bp_addr & ~(PAGE - 1) == page:
                raise OverlappingTrap(
                    f"page {page:#x} holds a software breakpoint")

    ensure_scratch_page(t)
    t.memory_map(refresh=True)
    orig: dict[int, int] = {}
    for page in pages:
        region = t.find_region(page)
        if region is None:
            raise MemoryAccessError(f"page {page:#x} is not mapped")
        orig[page] = _prot_bits(region.perms)

    strip = PROT_EXEC if access == "exec" else (PROT_READ | PROT_WRITE)
    for page in pages:
        ret = remote_mprotect(t, page, PAGE, orig[page] & ~strip)
        if ret < 0:
            for done in pages[:pages.index(page)]:
                remote_mprotect(t, done, PAGE, orig[done])
            raise MemoryAccessError(f"mprotect({page:#x}) failed: errno {-ret}")

    trap = PageTrap(pages=orig, watched_ranges=[(lo, hi)], access=access)
    reg.page_traps.append(trap)
    return trap


def teardown(t: TargetProcess, trap: PageTrap) -> None:
    if not trap.active:
        raise StateError("page trap already torn down")
    if t.state.is_stopped:
        for page, prot in trap.pages.items():
            remote_mprotect(t, page, PAGE, prot)
    trap.active = False
    reg = registry(t)
    if trap in reg.page_traps:
        reg.page_traps.remove(trap)


def find_page_trap(t: TargetProcess, fault_addr: int) -> PageTrap | None:
    page = fault_addr & ~(PAGE - 1)
    for trap in registry(t).page_traps:
        if trap.active and page in trap.pages:
            return trap
    return None


def _service_fault(t: TargetProcess, trap: PageTrap, strip: int) -> bool:
    """Restore page perms, step the faulting instruction, re-strip.

    One register envelope around the whole cycle: the user state is saved
    once, every mprotect runs on the pre-armed scratch page with raw resume
    calls, and the post-step state is written back at the end.  Returns
    whether the target is still alive.
    """
    import ctypes
    scratch = ensure_scratch_page(t)
    saved = t.get_gp_registers()
    pid = t.pid
    raw = t._raw_regs
    raw_ref = ctypes.byref(raw)
    ptrace_raw = target_mod._libc.ptrace
    land = scratch + 3
    CONT, STEP, GETREGS, SETREGS = 7, 9, 12, 13

    def run_mprotect(page: int, prot: int) -> None:
        t._fetch_raw()
        raw.rip, raw.rax = scratch, SYS_MPROTECT
        raw.rdi, raw.rsi, raw.rdx = page, PAGE, prot
        ptrace_raw(SETREGS, pid, None, raw_ref)
        t._raw_fresh = False
        if ptrace_raw(CONT, pid, None, None) != 0:
            raise WaitError("resume failed during fault service")
        _, status = os.waitpid(pid, 0)
        if not ((status & 0xFF) == 0x7F and ((status >> 8) & 0xFF) == 5):
            t.classify_status(status, "continue")
            raise InjectError(f"mprotect injection stopped oddly: {status:#x}")
        ptrace_raw(GETREGS, pid, None, raw_ref)
        t._raw_fresh = True
        if raw.rip != land or raw.rax != 0:
            raise InjectError(
                f"mprotect({page:#x}, {prot}) failed in fault service "
                f"(rip={raw.rip:#x}, ret={ctypes.c_long(raw.rax).value})")

    for p, prot in trap.pages.items():
        run_mprotect(p, prot)
    t.set_gp_registers(saved)

    t._raw_fresh = False
    if ptrace_raw(STEP, pid, None, None) != 0:
        raise WaitError("step failed during fault service")
    _, status = os.waitpid(pid, 0)
    if (status & 0xFF) == 0x7F and ((status >> 8) & 0xFF) == 5:
        t.state = State.STOPPED
        post = t.get_gp_registers()
        t.last_event = StopEvent(StopKind.SINGLE_STEP, pc=post.pc)
    else:
        ev = t.classify_status(status, "step")
        if ev.kind == StopKind.EXITED:
            return False
        post = t.get_gp_registers()

    for p, prot in trap.pages.items():
        run_mprotect(p, prot & ~strip)
    t.set_gp_registers(post)
    return True


def handle_access_fault(t: TargetProcess, trap: PageTrap,
                        ev: StopEvent) -> FaultOutcome:
    """Restore perms, step the faulting instruction, re-strip, count.

    Counted only when the fault address lies in a watched range; faults that
    merely share the page are serviced transparently.
    """
    if ev.kind != StopKind.ACCESS_FAULT or ev.fault_addr is None:
        raise NotOurTrap("event is not an access fault")
    page = ev.fault_addr & ~(PAGE - 1)
    if page not in trap.pages:
        return FaultOutcome.UNRELATED

    strip = PROT_EXEC if trap.access == "exec" else (PROT_READ | PROT_WRITE)
    _service_fault(t, trap, strip)
    t.invalidate_memory_map()

    trap.fault_total += 1
    if any(lo <= ev.fault_addr < hi for lo, hi in trap.watched_ranges):
        trap.hit_count += 1
        return FaultOutcome.COUNTED
    return FaultOutcome.TRANSPARENT


# --- single-stepping ----------------------------------------------------------------

_UNPREDICTABLE = frozenset({"string"})


def drive_single_step(t: TargetProcess, cap: int = SINGLE_STEP_CAP,
                      observer=None, stop_pc: int | None = None) -> StepReport:
    """Step instruction by instruction until exit, cap, or stop_pc.

    The observer is called once per executed instruction with
    (pc, first opcode byte).  stop_pc stops before executing that address.

    The driver snapshots the executable regions once and pre-decodes them:
    straight-line instructions advance a predicted pc without re-reading
    registers, branches and anything undecodable re-read the real pc, and a
    `syscall` goes through the trap-byte step (the step flag does not survive
    syscall entry on all kernels).
    """
    if cap <= 0:
        raise ValueError("cap must be positive")
    if not t.state.is_stopped:
        raise StateError("drive_single_step requires a stopped target")
    steps = 0
    pc = t.read_pc()
    pending_signal = 0

    code_cache: list[tuple[int, int, bytes]] = []
    for region in t.memory_map():
        if (region.executable and region.end - region.start <= 1 << 22
                and region.end < 1 << 47):      # skip vsyscall/kernel space
            try:
                data = t.read_memory(region.start, region.end - region.start)
            except (MemoryAccessError, OverflowError):
                continue
            code_cache.append((region.start, region.end, data))

    # pc -> (first byte, advance or None, is_syscall); None advance = re-read pc
    insn_info: dict[int, tuple[int, int | None, bool]] = {}

    def lookup(addr: int) -> tuple[int, int | None, bool]:
        cached = insn_info.get(addr)
        if cached is not None:
            return cached
        chunk = b""
        for start, end, data in code_cache:
            if start <= addr < end:
                off = addr - start
                chunk = data[off:off + 16]
                break
        else:
            try:
                chunk = t.read_memory(addr, 16)
            except MemoryAccessError:
                chunk = b""
        if not chunk:
            info = (0, None, False)
        elif chunk[:2] == _SYSCALL_INSN:
            info = (chunk[0], None, True)
        else:
            insn = decode_one(chunk)
            if (insn is None or insn.control_transfer
                    or insn.cls in _UNPREDICTABLE):
                info = (chunk[0], None, False)
            else:
                info = (chunk[0], insn.length, False)
        insn_info[addr] = info
        return info

    # Hot loop: raw ptrace + waitpid, everything else in locals.  The two
    # kernel round-trips dominate; keep the Python share per step minimal.
    # The register cache is marked stale once; branch steps fetch the pc
    # straight into the shared buffer, cold paths re-fetch on their own.
    import ctypes
    ptrace_raw = target_mod._libc.ptrace
    wait = os.waitpid
    pid = t.pid
    info_get = insn_info.get
    obs = observer
    stop_at = -1 if stop_pc is None else stop_pc
    raw_regs = t._raw_regs
    raw_ref = ctypes.byref(raw_regs)
    PTRACE_STEP_REQ, PTRACE_GETREGS_REQ = 9, 12
    t._raw_fresh = False
    while True:
        if pc == stop_at:
            return StepReport(steps, False, cap)
        if steps >= cap:
            return StepReport(steps, True, cap)
        info = info_get(pc)
        if info is None:
            info = lookup(pc)
        first, advance, is_syscall = info
        if is_syscall or pending_signal:
            if is_syscall:
                ev = step_instruction(t, pc=pc, deliver_signal=pending_signal)
            else:
                ev = t.resume_wait("step", deliver_signal=pending_signal)
            pending_signal = 0
            t._raw_fresh = False
            if ev.kind == StopKind.EXITED:
                steps += 1
                if obs is not None:
                    obs(pc, first)
                return StepReport(steps, False, cap)
            if ev.kind != StopKind.SINGLE_STEP:
                if ev.kind == StopKind.SIGNAL_DELIVERY:
                    pending_signal = ev.signo or 0
                    continue
                return StepReport(steps, False, cap)
            steps += 1
            if obs is not None:
                obs(pc, first)
            pc = ev.pc
            continue

        if ptrace_raw(PTRACE_STEP_REQ, pid, None, None) != 0:
            t.state = State.SIGNALED
            raise WaitError("single-step request failed")
        _, status = wait(pid, 0)
        # inline WIFSTOPPED(status) and WSTOPSIG(status) == SIGTRAP
        if (status & 0xFF) == 0x7F and ((status >> 8) & 0xFF) == 5:
            steps += 1
            if obs is not None:
                obs(pc, first)
            if advance is not None:
                pc += advance
            else:
                ptrace_raw(PTRACE_GETREGS_REQ, pid, None, raw_ref)
                pc = raw_regs.rip
            continue
        ev = t.classify_status(status, "step")
        if ev.kind == StopKind.EXITED:
            steps += 1
            if obs is not None:
                obs(pc, first)
            return StepReport(steps, False, cap)
        if ev.kind == StopKind.SIGNAL_DELIVERY:
            pending_signal = ev.signo or 0   # re-deliver, instruction not run
            continue
        # Access fault or foreign trap: leave it as last_event for the caller.
        return StepReport(steps, False, cap)


def read_hit_counts(t: TargetProcess) -> dict[int, int]:
    """Per-address hit counts for all armed software breakpoints."""
    return {addr: bp.hit_count for addr, bp in registry(t).sw.items()}
