"""Spawn and control a single-threaded Linux x86-64 process via ptrace.

One TargetProcess owns one traced child.  All requests must come from the
thread that spawned it (kernel debug-interface rule); distinct targets can
live on distinct threads.  Memory access goes through /proc/<pid>/mem, which
honors tracer privilege (writes land in read-only code pages too).
"""

from __future__ import annotations

import ctypes
import os
import signal
import time
from dataclasses import dataclass
from enum import Enum

from .elffile import ElfFile
from .errors import (MemoryAccessError, SnapshotError, SpawnError,
                     StateError, WaitError)
from .x86 import classify_data_access

_libc = ctypes.CDLL(None, use_errno=True)
_libc.ptrace.restype = ctypes.c_long
_libc.ptrace.argtypes = [ctypes.c_long, ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p]

PTRACE_TRACEME = 0
PTRACE_PEEKUSER = 3
PTRACE_POKEUSER = 6
PTRACE_CONT = 7
PTRACE_SINGLESTEP = 9
PTRACE_GETREGS = 12
PTRACE_SETREGS = 13
PTRACE_SETOPTIONS = 0x4200
PTRACE_GETSIGINFO = 0x4202
PTRACE_O_EXITKILL = 0x00100000

ADDR_NO_RANDOMIZE = 0x0040000
_DEBUGREG_OFFSET = 848          # offsetof(struct user, u_debugreg) on x86-64
_CPUCLOCK_SCHED = 2

PAGE = 0x1000


class _UserRegs(ctypes.Structure):
    _fields_ = [(n, ctypes.c_ulonglong) for n in (
        "r15", "r14", "r13", "r12", "rbp", "rbx", "r11", "r10", "r9", "r8",
        "rax", "rcx", "rdx", "rsi", "rdi", "orig_rax", "rip", "cs", "eflags",
        "rsp", "ss", "fs_base", "gs_base", "ds", "es", "fs", "gs")]


class _SigInfo(ctypes.Structure):
    _fields_ = [("si_signo", ctypes.c_int), ("si_errno", ctypes.c_int),
                ("si_code", ctypes.c_int), ("_pad", ctypes.c_int),
                ("si_addr", ctypes.c_ulonglong), ("_rest", ctypes.c_byte * 112)]


GP_REGS = ("rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp",
           "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")


@dataclass
class RegisterFile:
    """General-purpose registers, pc, flags, and the debug register bank."""

    rax: int = 0
    rbx: int = 0
    rcx: int = 0
    rdx: int = 0
    rsi: int = 0
    rdi: int = 0
    rbp: int = 0
    rsp: int = 0
    r8: int = 0
    r9: int = 0
    r10: int = 0
    r11: int = 0
    r12: int = 0
    r13: int = 0
    r14: int = 0
    r15: int = 0
    pc: int = 0
    flags: int = 0
    dr0: int = 0
    dr1: int = 0
    dr2: int = 0
    dr3: int = 0
    dr7: int = 0


class State(Enum):
    STOPPED_AT_ENTRY = "stopped-at-entry"
    STOPPED = "stopped"
    RUNNING = "running"
    EXITED = "exited"
    SIGNALED = "signaled"

    @property
    def is_stopped(self) -> bool:
        return self in (State.STOPPED_AT_ENTRY, State.STOPPED)

    @property
    def is_terminal(self) -> bool:
        return self in (State.EXITED, State.SIGNALED)


class StopKind(Enum):
    BREAKPOINT_TRAP = "breakpoint"
    SINGLE_STEP = "step"
    ACCESS_FAULT = "fault"
    SIGNAL_DELIVERY = "signal"
    EXITED = "exited"


@dataclass(frozen=True)
class StopEvent:
    kind: StopKind
    pc: int | None = None
    exit_code: int | None = None          # negative = killed by that signal
    signo: int | None = None
    fault_addr: int | None = None
    access: str | None = None             # "read" | "write" | "exec"
    si_code: int | None = None


@dataclass(frozen=True)
class ClockSample:
    wall_ns: int
    cpu_child_ns: int
    cpu_tracer_ns: int


@dataclass(frozen=True)
class ProcSnapshot:
    stat_raw: bytes
    status_raw: bytes
    timestamp: ClockSample


@dataclass(frozen=True)
class MemoryRegion:
    start: int
    end: int
    perms: str                             # e.g. "r-xp"
    path: str

    def contains(self, addr: int) -> bool:
        return self.start <= addr < self.end

    @property
    def readable(self) -> bool:
        return self.perms[0] == "r"

    @property
    def writable(self) -> bool:
        return self.perms[1] == "w"

    @property
    def executable(self) -> bool:
        return self.perms[2] == "x"


def _ptrace(req: int, pid: int, addr: int, data) -> int:
    ctypes.set_errno(0)
    if isinstance(data, int):
        data = ctypes.c_void_p(data)
    ret = _libc.ptrace(req, pid, ctypes.c_void_p(addr), data)
    err = ctypes.get_errno()
    if ret == -1 and err != 0:
        raise OSError(err, f"ptrace(req={req}, pid={pid}): {os.strerror(err)}")
    return ret


class TargetProcess:
    """A stopped-or-running traced child with register/memory access."""

    def __init__(self, pid: int, path: str):
        self.pid = pid
        self.path = path
        self.state = State.STOPPED_AT_ENTRY
        self.exit_code: int | None = None
        self.last_event: StopEvent | None = None
        self._mem_fd: int | None = None
        self._maps_cache: list[MemoryRegion] | None = None
        self._elf: ElfFile | None = None
        self._last_child_cpu_ns = 0
        self._raw_regs = _UserRegs()
        self._raw_fresh = False       # buffer mirrors the stopped target

    # -- lifecycle -----------------------------------------------------------

    @classmethod
    def spawn_stopped(cls, path: str, args: list[str] | None = None,
                      env: dict[str, str] | None = None,
                      disable_aslr: bool = False,
                      stdout_path: str | None = None) -> "TargetProcess":
        """Fork+exec the target, stopped before its first instruction."""
        if not os.path.isfile(path):
            raise SpawnError(f"{path}: no such file")
        if not os.access(path, os.X_OK):
            raise SpawnError(f"{path}: not executable")
        args = [path] + list(args or [])
        pid = os.fork()
        if pid == 0:
            try:
                if _libc.ptrace(PTRACE_TRACEME, 0, None, None) == -1:
                    os._exit(126)
                if disable_aslr:
                    # Child-only; some sandboxed kernels reject it, which is
                    # harmless for fixed-base non-PIE targets.
                    _libc.personality(ctypes.c_ulong(ADDR_NO_RANDOMIZE))
                if stdout_path is not None:
                    fd = os.open(stdout_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
                    os.dup2(fd, 1)
                    os.close(fd)
                os.execve(path, args, env if env is not None else {})
            except OSError:
                pass
            os._exit(127)
        try:
            _, status = os.waitpid(pid, 0)
        except OSError as e:
            raise SpawnError(f"wait for {path} failed: {e}") from e
        if os.WIFEXITED(status):
            code = os.WEXITSTATUS(status)
            if code == 126:
                raise PermissionError("debug interface denied (ptrace traceme failed)")
            raise SpawnError(f"{path}: exec failed (child exited {code})")
        if not (os.WIFSTOPPED(status) and os.WSTOPSIG(status) == signal.SIGTRAP):
            raise SpawnError(f"{path}: unexpected first stop {status:#x}")
        _ptrace(PTRACE_SETOPTIONS, pid, 0, PTRACE_O_EXITKILL)
        return cls(pid, os.path.realpath(path))

    def reap(self) -> None:
        """Force the child gone; safe to call multiple times."""
        if self._mem_fd is not None:
            try:
                os.close(self._mem_fd)
            except OSError:
                pass
            self._mem_fd = None
        if self.state.is_terminal:
            return
        try:
            os.kill(self.pid, signal.SIGKILL)
            os.waitpid(self.pid, 0)
        except (OSError, ChildProcessError):
            pass
        self.state = State.SIGNALED
        if self.exit_code is None:
            self.exit_code = -signal.SIGKILL

    def __enter__(self) -> "TargetProcess":
        return self

    def __exit__(self, *exc) -> None:
        self.reap()

    # -- memory --------------------------------------------------------------

    def _require_stopped(self, what: str) -> None:
        if not self.state.is_stopped:
            raise StateError(f"{what} requires a stopped target (state={self.state.value})")

    def _mem(self) -> int:
        if self._mem_fd is None:
            try:
                self._mem_fd = os.open(f"/proc/{self.pid}/mem", os.O_RDWR)
            except OSError as e:
                raise MemoryAccessError(f"cannot open target memory: {e}") from e
        return self._mem_fd

    def read_memory(self, addr: int, length: int) -> bytes:
        self._require_stopped("read_memory")
        try:
            data = os.pread(self._mem(), length, addr)
        except OSError as e:
            raise MemoryAccessError(f"read {length} bytes at {addr:#x}: {e}") from e
        if len(data) != length:
            raise MemoryAccessError(f"short read at {addr:#x} ({len(data)}/{length})")
        return data

    def write_memory(self, addr: int, data: bytes) -> None:
        self._require_stopped("write_memory")
        try:
            n = os.pwrite(self._mem(), data, addr)
        except OSError as e:
            raise MemoryAccessError(f"write {len(data)} bytes at {addr:#x}: {e}") from e
        if n != len(data):
            raise MemoryAccessError(f"short write at {addr:#x} ({n}/{len(data)})")

    def memory_map(self, refresh: bool = False) -> list[MemoryRegion]:
        """Parsed /proc maps; cached until an operation can change mappings."""
        if self.state.is_terminal:
            raise StateError("memory_map on terminated target")
        if self._maps_cache is None or refresh:
            regions = []
            try:
                with open(f"/proc/{self.pid}/maps") as f:
                    for line in f:
                        rng, perms, _off, _dev, _inode, *rest = line.split(maxsplit=5)
                        start, end = (int(x, 16) for x in rng.split("-"))
                        regions.append(MemoryRegion(start, end, perms,
                                                    rest[0].strip() if rest else ""))
            except OSError as e:
                raise MemoryAccessError(f"cannot read maps: {e}") from e
            self._maps_cache = regions
        return self._maps_cache

    def invalidate_memory_map(self) -> None:
        self._maps_cache = None

    def find_region(self, addr: int) -> MemoryRegion | None:
        for r in self.memory_map():
            if r.contains(addr):
                return r
        return None

    # -- registers -----------------------------------------------------------

    def _fetch_raw(self) -> _UserRegs:
        if not self._raw_fresh:
            _ptrace(PTRACE_GETREGS, self.pid, 0, ctypes.byref(self._raw_regs))
            self._raw_fresh = True
        return self._raw_regs

    def _rf_from_raw(self, raw: _UserRegs) -> RegisterFile:
        rf = RegisterFile()
        for name in GP_REGS:
            setattr(rf, name, getattr(raw, name))
        rf.pc = raw.rip
        rf.flags = raw.eflags
        return rf

    def get_registers(self) -> RegisterFile:
        self._require_stopped("registers")
        rf = self._rf_from_raw(self._fetch_raw())
        for i in (0, 1, 2, 3, 7):
            setattr(rf, f"dr{i}", self._peek_debugreg(i))
        return rf

    def get_gp_registers(self) -> RegisterFile:
        """Registers without the debug bank; cheap path for internal use."""
        self._require_stopped("registers")
        return self._rf_from_raw(self._fetch_raw())

    def _set_gp(self, rf: RegisterFile) -> None:
        raw = self._fetch_raw()
        for name in GP_REGS:
            setattr(raw, name, getattr(rf, name))
        raw.rip = rf.pc
        raw.eflags = rf.flags
        _ptrace(PTRACE_SETREGS, self.pid, 0, ctypes.byref(raw))

    def set_gp_registers(self, rf: RegisterFile) -> None:
        """Write general-purpose state only; debug registers untouched."""
        self._require_stopped("registers")
        self._set_gp(rf)

    def set_registers(self, rf: RegisterFile) -> None:
        self._require_stopped("registers")
        self._set_gp(rf)
        for i in (0, 1, 2, 3, 7):
            want = getattr(rf, f"dr{i}")
            if self._peek_debugreg(i) != want:
                self._poke_debugreg(i, want)

    def _peek_debugreg(self, idx: int) -> int:
        val = _ptrace(PTRACE_PEEKUSER, self.pid, _DEBUGREG_OFFSET + idx * 8, 0)
        return val & 0xFFFFFFFFFFFFFFFF

    def _poke_debugreg(self, idx: int, value: int) -> None:
        _ptrace(PTRACE_POKEUSER, self.pid, _DEBUGREG_OFFSET + idx * 8, value)

    # -- execution -----------------------------------------------------------

    def step_raw(self, deliver_signal: int = 0) -> int:
        """Single step returning the raw wait status; no classification.

        Fast path for step drivers.  Exit bookkeeping still happens; on a
        stop the state is STOPPED and the caller classifies."""
        self._raw_fresh = False
        try:
            _ptrace(PTRACE_SINGLESTEP, self.pid, 0, deliver_signal)
            _, status = os.waitpid(self.pid, 0)
        except (OSError, ChildProcessError) as e:
            self.state = State.SIGNALED
            raise WaitError(f"target vanished: {e}") from e
        if os.WIFEXITED(status):
            self.state = State.EXITED
            self.exit_code = os.WEXITSTATUS(status)
        elif os.WIFSIGNALED(status):
            self.state = State.SIGNALED
            self.exit_code = -os.WTERMSIG(status)
        else:
            self.state = State.STOPPED
        return status

    def read_pc(self) -> int:
        return self._fetch_raw().rip

    def classify_status(self, status: int, mode: str) -> StopEvent:
        ev = self._classify(status, mode)
        self.last_event = ev
        return ev

    def resume_wait(self, mode: str = "continue",
                    deliver_signal: int = 0) -> StopEvent:
        """Resume until the next stop cause and classify it."""
        self._require_stopped("resume_wait")
        req = PTRACE_SINGLESTEP if mode == "step" else PTRACE_CONT
        self._raw_fresh = False
        try:
            _ptrace(req, self.pid, 0, deliver_signal)
        except OSError as e:
            raise WaitError(str(e)) from e
        self.state = State.RUNNING
        try:
            _, status = os.waitpid(self.pid, 0)
        except (OSError, ChildProcessError) as e:
            self.state = State.SIGNALED
            raise WaitError(f"target vanished: {e}") from e
        ev = self._classify(status, mode)
        self.last_event = ev
        return ev

    def _classify(self, status: int, mode: str) -> StopEvent:
        if os.WIFEXITED(status):
            self.state = State.EXITED
            self.exit_code = os.WEXITSTATUS(status)
            return StopEvent(StopKind.EXITED, exit_code=self.exit_code)
        if os.WIFSIGNALED(status):
            self.state = State.SIGNALED
            self.exit_code = -os.WTERMSIG(status)
            return StopEvent(StopKind.EXITED, exit_code=self.exit_code,
                             signo=os.WTERMSIG(status))
        if not os.WIFSTOPPED(status):
            raise WaitError(f"unexpected wait status {status:#x}")
        self.state = State.STOPPED
        sig = os.WSTOPSIG(status)
        if sig == signal.SIGTRAP and mode == "step":
            # Hot path for step-overs: the trap cause is unambiguous.
            return StopEvent(StopKind.SINGLE_STEP, pc=self._fetch_raw().rip)
        si = _SigInfo()
        try:
            _ptrace(PTRACE_GETSIGINFO, self.pid, 0, ctypes.byref(si))
            si_code = si.si_code
        except OSError:
            si_code = None
        pc = self._fetch_raw().rip

        if sig == signal.SIGTRAP:
            if si_code == 4:            # TRAP_HWBKPT
                return StopEvent(StopKind.BREAKPOINT_TRAP, pc=pc, si_code=si_code)
            if mode == "step":
                return StopEvent(StopKind.SINGLE_STEP, pc=pc, si_code=si_code)
            return StopEvent(StopKind.BREAKPOINT_TRAP, pc=pc, si_code=si_code)
        if sig in (signal.SIGSEGV, signal.SIGBUS):
            fault_addr = si.si_addr
            if fault_addr == pc:
                access = "exec"
            else:
                try:
                    access = classify_data_access(self.read_memory(pc, 16))
                except MemoryAccessError:
                    access = "read"
            return StopEvent(StopKind.ACCESS_FAULT, pc=pc, signo=sig,
                             fault_addr=fault_addr, access=access, si_code=si_code)
        return StopEvent(StopKind.SIGNAL_DELIVERY, pc=pc, signo=sig, si_code=si_code)

    # -- symbols ---------------------------------------------------------------

    def _elf_file(self) -> ElfFile:
        if self._elf is None:
            self._elf = ElfFile(self.path)
        return self._elf

    def load_bias(self) -> int:
        """Runtime displacement of the executable image (0 for fixed-base)."""
        elf = self._elf_file()
        lowest = None
        for r in self.memory_map():
            if r.path == self.path and (lowest is None or r.start < lowest):
                lowest = r.start
        if lowest is None:
            return 0
        if elf.etype == 2:      # ET_EXEC loads at its linked address
            return 0
        return lowest - elf.min_load_vaddr()

    def resolve_symbol(self, name: str) -> int:
        """Virtual address of the first defined symbol with this name."""
        sym = self._elf_file().lookup(name)
        if self.state.is_terminal:
            return sym.value
        return sym.value + self.load_bias()

    # -- clocks and /proc -------------------------------------------------------

    def read_clocks(self) -> ClockSample:
        wall = time.monotonic_ns()
        tracer = time.clock_gettime_ns(time.CLOCK_PROCESS_CPUTIME_ID)
        child = self._last_child_cpu_ns
        if not self.state.is_terminal:
            clkid = ((~self.pid) << 3) | _CPUCLOCK_SCHED
            try:
                child = time.clock_gettime_ns(clkid)
                self._last_child_cpu_ns = child
            except OSError:
                pass
        return ClockSample(wall_ns=wall, cpu_child_ns=child, cpu_tracer_ns=tracer)

    def snapshot_proc(self) -> ProcSnapshot:
        if self.state.is_terminal:
            raise SnapshotError("target has exited")
        try:
            with open(f"/proc/{self.pid}/stat", "rb") as f:
                stat = f.read()
            with open(f"/proc/{self.pid}/status", "rb") as f:
                status = f.read()
        except OSError as e:
            raise SnapshotError(f"proc files unreadable: {e}") from e
        return ProcSnapshot(stat_raw=stat, status_raw=status,
                            timestamp=self.read_clocks())


def spawn_stopped(path: str, args: list[str] | None = None,
                  env: dict[str, str] | None = None,
                  disable_aslr: bool = False,
                  stdout_path: str | None = None) -> TargetProcess:
    return TargetProcess.spawn_stopped(path, args, env, disable_aslr, stdout_path)
