"""Dynamic probe injection: counting trampolines patched into a live target.

A probe overwrites a relocatable instruction window with a 5-byte relative
jump into a stub page mapped inside the target.  The stub saves flags and
general-purpose registers, bumps a 64-bit in-target counter, restores state,
executes the displaced instructions, and jumps back.  The counter lives on
the stub page, reachable rip-relative, so the stub clobbers nothing.

Sites whose window contains a control transfer or a pc-relative operand are
rejected rather than relocated; jumps landing inside a displaced window are
undetectable without whole-program CFG and remain the caller's burden.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import InjectError, PcInWindow, StateError, UnsupportedSite
from .target import PAGE, TargetProcess
from .traps import (MAP_PRIVATE_ANON, PROT_EXEC, PROT_READ, PROT_WRITE,
                    SYS_MMAP, SYS_MUNMAP, inject_syscall, registry)
from .x86 import JMP_REL32_LEN, decode_one

_MAX_WINDOW = 32
_COUNTER_OFF = 0
_STUB_OFF = 16
_REL32_REACH = (1 << 31) - PAGE

_HINT_STRIDE = [0x10000000, 0x18000000, 0x20000000, 0x28000000,
                0x30000000, 0x40000000, 0x50000000, 0x60000000]


@dataclass
class ProbePlan:
    addr: int
    displaced_len: int
    displaced_bytes: bytes
    insn_boundaries: list[int]        # cumulative offsets, last == displaced_len


@dataclass
class ProbeSite:
    plan: ProbePlan
    page_addr: int
    stub_addr: int
    counter_addr: int
    stub_len: int
    active: bool = True


def plan_probe_site(t: TargetProcess, addr: int) -> ProbePlan:
    """Decode forward from addr until a 5-byte jump fits; reject unsafe sites."""
    region = t.find_region(addr)
    if region is None or not region.executable:
        raise UnsupportedSite(f"{addr:#x} is not mapped executable")
    code = t.read_memory(addr, _MAX_WINDOW)
    boundaries: list[int] = []
    off = 0
    while off < JMP_REL32_LEN:
        insn = decode_one(code, off)
        if insn is None:
            raise UnsupportedSite(f"undecodable instruction at {addr + off:#x}")
        if insn.control_transfer:
            raise UnsupportedSite(f"control transfer at {addr + off:#x} "
                                  "inside the probe window")
        if insn.pc_relative:
            raise UnsupportedSite(f"pc-relative operand at {addr + off:#x} "
                                  "inside the probe window")
        off += insn.length
        boundaries.append(off)
    return ProbePlan(addr=addr, displaced_len=off,
                     displaced_bytes=code[:off], insn_boundaries=boundaries)


_PUSHES = bytes([0x50, 0x51, 0x52, 0x53, 0x55, 0x56, 0x57]) + bytes(
    b for i in range(8) for b in (0x41, 0x50 + i))
_POPS = bytes(
    b for i in range(7, -1, -1) for b in (0x41, 0x58 + i)) + bytes(
    [0x5F, 0x5E, 0x5D, 0x5B, 0x5A, 0x59, 0x58])

_ENTER = b"\x48\x8d\x64\x24\x80" + b"\x9c" + _PUSHES       # lea rsp,[rsp-128]; pushfq; pushes
_LEAVE = _POPS + b"\x9d" + b"\x48\x8d\xa4\x24\x80\x00\x00\x00"  # pops; popfq; lea rsp,[rsp+128]


def _build_stub(stub_addr: int, counter_addr: int, plan: ProbePlan) -> bytes:
    stub = bytearray(_ENTER)
    inc_at = stub_addr + len(stub)
    rel = counter_addr - (inc_at + 7)
    stub += b"\x48\xff\x05" + struct.pack("<i", rel)        # inc qword [rip+rel]
    stub += _LEAVE
    stub += plan.displaced_bytes
    back_target = plan.addr + plan.displaced_len
    jmp_at = stub_addr + len(stub)
    stub += b"\xe9" + struct.pack("<i", back_target - (jmp_at + 5))
    return bytes(stub)


def _map_stub_page(t: TargetProcess, addr: int) -> int:
    base = addr & ~(PAGE - 1)
    for stride in _HINT_STRIDE:
        hint = base + stride
        ret = inject_syscall(t, SYS_MMAP,
                             (hint, PAGE, PROT_READ | PROT_WRITE | PROT_EXEC,
                              MAP_PRIVATE_ANON, 0xFFFFFFFFFFFFFFFF, 0))
        if ret < 0:
            continue
        if abs(ret - addr) < _REL32_REACH:
            t.invalidate_memory_map()
            return ret
        inject_syscall(t, SYS_MUNMAP, (ret, PAGE))
    raise InjectError(f"no stub page reachable by rel32 from {addr:#x}")


def inject_probe(t: TargetProcess, plan: ProbePlan) -> ProbeSite:
    if not t.state.is_stopped:
        raise StateError("inject_probe requires a stopped target")
    current = t.read_memory(plan.addr, plan.displaced_len)
    if current != plan.displaced_bytes:
        raise UnsupportedSite(f"bytes at {plan.addr:#x} changed since planning")
    pc = t.read_pc()
    if plan.addr <= pc < plan.addr + plan.displaced_len:
        raise PcInWindow(f"pc {pc:#x} is inside the patch window")

    page = _map_stub_page(t, plan.addr)
    counter_addr = page + _COUNTER_OFF
    stub_addr = page + _STUB_OFF
    stub = _build_stub(stub_addr, counter_addr, plan)
    t.write_memory(counter_addr, struct.pack("<Q", 0))
    t.write_memory(stub_addr, stub)

    patch = b"\xe9" + struct.pack("<i", stub_addr - (plan.addr + 5))
    patch += b"\xcc" * (plan.displaced_len - JMP_REL32_LEN)
    t.write_memory(plan.addr, patch)

    registry(t).internal_pages.add(page)
    return ProbeSite(plan=plan, page_addr=page, stub_addr=stub_addr,
                     counter_addr=counter_addr, stub_len=len(stub))


def read_counter(t: TargetProcess, site: ProbeSite) -> int:
    return struct.unpack("<Q", t.read_memory(site.counter_addr, 8))[0]


def remove_probe(t: TargetProcess, site: ProbeSite) -> None:
    if not site.active:
        raise StateError("probe already removed")
    if not t.state.is_stopped:
        raise StateError("remove_probe requires a stopped target")
    pc = t.read_pc()
    plan = site.plan
    if plan.addr <= pc < plan.addr + plan.displaced_len:
        raise PcInWindow(f"pc {pc:#x} is inside the probe window")
    if site.stub_addr <= pc < site.stub_addr + site.stub_len:
        raise PcInWindow(f"pc {pc:#x} is inside the stub")
    t.write_memory(plan.addr, plan.displaced_bytes)
    inject_syscall(t, SYS_MUNMAP, (site.page_addr, PAGE))
    t.invalidate_memory_map()
    registry(t).internal_pages.discard(site.page_addr)
    site.active = False
