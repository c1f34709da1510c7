"""Instrumentation primitives, the technique capability matrix, and plans.

The matrix records which of the five in-process techniques can implement
which fundamental primitive, with partial entries annotated.  build_plan
turns a (primitive, technique) pair into a concrete armable plan or refuses
with CapabilityError / PlatformError.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from . import probes, traps
from .errors import CapabilityError, PlatformError
from .target import PAGE, StopKind, TargetProcess
from .x86 import BRANCH_CLASSES


@dataclass(frozen=True)
class ExecSingle:
    addr: int


@dataclass(frozen=True)
class ExecRange:
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo >= self.hi:
            raise ValueError(f"empty range [{self.lo:#x}, {self.hi:#x})")


@dataclass(frozen=True)
class ExecAll:
    pass


@dataclass(frozen=True)
class ExecType:
    classes: frozenset = frozenset(BRANCH_CLASSES)


@dataclass(frozen=True)
class RwSingle:
    addr: int


@dataclass(frozen=True)
class RwRange:
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo >= self.hi:
            raise ValueError(f"empty range [{self.lo:#x}, {self.hi:#x})")


Primitive = ExecSingle | ExecRange | ExecAll | ExecType | RwSingle | RwRange

PRIMITIVE_KINDS = (ExecSingle, ExecRange, ExecAll, ExecType, RwSingle, RwRange)
PRIMITIVE_NAMES = {
    ExecSingle: "exec_single",
    ExecRange: "exec_range",
    ExecAll: "exec_all",
    ExecType: "exec_type",
    RwSingle: "rw_single",
    RwRange: "rw_range",
}


class TechniqueKind(Enum):
    DPI = "dpi"
    SW_BREAKPOINT = "sw_breakpoint"
    HW_BREAKPOINT = "hw_breakpoint"
    SINGLE_STEP = "single_step"
    PAGE_FAULT = "page_fault"


class CapabilityLevel(Enum):
    FULL = "full"
    PARTIAL = "partial"
    NONE = "none"


@dataclass(frozen=True)
class Capability:
    level: CapabilityLevel
    note: str = ""

    def __post_init__(self):
        if self.level is CapabilityLevel.PARTIAL and not self.note:
            raise ValueError("partial capability requires a note")


_FULL = Capability(CapabilityLevel.FULL)
_NONE = Capability(CapabilityLevel.NONE)

# Constant matrix: primitive kind -> technique -> capability.
MATRIX: dict[type, dict[TechniqueKind, Capability]] = {
    ExecSingle: {
        TechniqueKind.DPI: _FULL,
        TechniqueKind.SW_BREAKPOINT: _FULL,
        TechniqueKind.HW_BREAKPOINT: _FULL,
        TechniqueKind.SINGLE_STEP: _NONE,
        TechniqueKind.PAGE_FAULT: Capability(
            CapabilityLevel.PARTIAL, "page granularity + fault-address filter"),
    },
    ExecRange: {
        TechniqueKind.DPI: _NONE,
        TechniqueKind.SW_BREAKPOINT: _NONE,
        TechniqueKind.HW_BREAKPOINT: Capability(
            CapabilityLevel.PARTIAL,
            "ranged debug registers exist only on PowerPC; unavailable on x86-64"),
        TechniqueKind.SINGLE_STEP: _NONE,
        TechniqueKind.PAGE_FAULT: _FULL,
    },
    ExecAll: {
        TechniqueKind.DPI: _NONE,
        TechniqueKind.SW_BREAKPOINT: _NONE,
        TechniqueKind.HW_BREAKPOINT: _NONE,
        TechniqueKind.SINGLE_STEP: _FULL,
        TechniqueKind.PAGE_FAULT: _NONE,
    },
    ExecType: {
        TechniqueKind.DPI: _NONE,
        TechniqueKind.SW_BREAKPOINT: _NONE,
        TechniqueKind.HW_BREAKPOINT: _NONE,
        TechniqueKind.SINGLE_STEP: Capability(
            CapabilityLevel.PARTIAL, "first-byte opcode filter in the step observer"),
        TechniqueKind.PAGE_FAULT: _NONE,
    },
    RwSingle: {
        TechniqueKind.DPI: _NONE,
        TechniqueKind.SW_BREAKPOINT: _NONE,
        TechniqueKind.HW_BREAKPOINT: _FULL,
        TechniqueKind.SINGLE_STEP: _NONE,
        TechniqueKind.PAGE_FAULT: Capability(
            CapabilityLevel.PARTIAL,
            "length-1 range at page granularity with fault-address filter"),
    },
    RwRange: {
        TechniqueKind.DPI: _NONE,
        TechniqueKind.SW_BREAKPOINT: _NONE,
        TechniqueKind.HW_BREAKPOINT: Capability(
            CapabilityLevel.PARTIAL,
            "ranged debug registers exist only on PowerPC; unavailable on x86-64"),
        TechniqueKind.SINGLE_STEP: _NONE,
        TechniqueKind.PAGE_FAULT: _FULL,
    },
}


def capability(tech: TechniqueKind, prim: Primitive | type) -> Capability:
    kind = prim if isinstance(prim, type) else type(prim)
    return MATRIX[kind][tech]


# --- executable plans ---------------------------------------------------------


@dataclass
class Caps:
    single_step: int = traps.SINGLE_STEP_CAP
    page_fault: int = traps.PAGE_FAULT_CAP


class InstrumentationPlan:
    """Binding of a primitive to a technique, with concrete arming actions."""

    owns_window_loop = False

    def __init__(self, primitive: Primitive, technique: TechniqueKind | None):
        self.primitive = primitive
        self.technique = technique
        self.actions: list[str] = []
        self.truncated = False

    def arm(self, t: TargetProcess) -> None:
        pass

    def handle(self, t: TargetProcess, ev) -> bool:
        """Service an event; True if it belonged to this plan."""
        return False

    def cap_reached(self, caps: Caps) -> bool:
        return False

    def event_count(self, t: TargetProcess) -> int:
        return 0

    def teardown(self, t: TargetProcess) -> None:
        pass


class BaselinePlan(InstrumentationPlan):
    def __init__(self):
        super().__init__(ExecAll(), None)
        self.actions = ["no instrumentation (baseline)"]


class SwBpPlan(InstrumentationPlan):
    def __init__(self, primitive: Primitive, addr: int):
        super().__init__(primitive, TechniqueKind.SW_BREAKPOINT)
        self.addr = addr
        self.bp: traps.SoftBreakpoint | None = None
        self.actions = [f"arm software breakpoint at {addr:#x}",
                        "counter: tracer-side hit count"]

    def arm(self, t: TargetProcess) -> None:
        self.bp = traps.arm_sw_breakpoint(t, self.addr)

    def handle(self, t: TargetProcess, ev) -> bool:
        if ev.kind != StopKind.BREAKPOINT_TRAP or ev.pc != self.addr + 1:
            return False
        traps.handle_sw_hit(t, self.bp)
        return True

    def event_count(self, t: TargetProcess) -> int:
        return self.bp.hit_count if self.bp else 0

    def teardown(self, t: TargetProcess) -> None:
        if self.bp is not None and self.bp.armed and t.state.is_stopped:
            traps.disarm_sw_breakpoint(t, self.bp)


class HwPlan(InstrumentationPlan):
    def __init__(self, primitive: Primitive,
                 watches: list[tuple[int, str, int]]):
        super().__init__(primitive, TechniqueKind.HW_BREAKPOINT)
        self.watches = watches
        self.slots: list[traps.HwSlot] = []
        self.actions = [f"arm debug slot {kind} len={ln} at {addr:#x}"
                        for addr, kind, ln in watches]
        self.actions.append("counter: tracer-side slot hit count")

    def arm(self, t: TargetProcess) -> None:
        for addr, kind, length in self.watches:
            self.slots.append(traps.arm_hw_slot(t, addr, kind, length))

    def handle(self, t: TargetProcess, ev) -> bool:
        if ev.kind != StopKind.BREAKPOINT_TRAP:
            return False
        try:
            traps.handle_hw_hit(t)
        except traps.NotOurTrap:
            return False
        return True

    def event_count(self, t: TargetProcess) -> int:
        return sum(s.hit_count for s in self.slots)

    def teardown(self, t: TargetProcess) -> None:
        for slot in self.slots:
            try:
                traps.clear_hw_slot(t, slot)
            except Exception:
                pass
        self.slots = []


class PageTrapPlan(InstrumentationPlan):
    def __init__(self, primitive: Primitive, lo: int, hi: int, access: str):
        super().__init__(primitive, TechniqueKind.PAGE_FAULT)
        self.lo, self.hi, self.access = lo, hi, access
        self.trap: traps.PageTrap | None = None
        pages = list(range(lo & ~(PAGE - 1), ((hi - 1) & ~(PAGE - 1)) + 1, PAGE))
        self.actions = [
            f"strip {'execute' if access == 'exec' else 'read+write'} "
            f"from pages {', '.join(hex(p) for p in pages)}",
            f"filter faults to [{lo:#x}, {hi:#x})",
            "counter: tracer-side filtered fault count"]

    def arm(self, t: TargetProcess) -> None:
        self.trap = traps.protect_range(t, self.lo, self.hi, self.access)

    def handle(self, t: TargetProcess, ev) -> bool:
        if ev.kind != StopKind.ACCESS_FAULT or self.trap is None:
            return False
        outcome = traps.handle_access_fault(t, self.trap, ev)
        return outcome is not traps.FaultOutcome.UNRELATED

    def cap_reached(self, caps: Caps) -> bool:
        return self.trap is not None and self.trap.hit_count >= caps.page_fault

    def event_count(self, t: TargetProcess) -> int:
        return self.trap.hit_count if self.trap else 0

    def teardown(self, t: TargetProcess) -> None:
        if self.trap is not None and self.trap.active:
            traps.teardown(t, self.trap)


class DpiPlan(InstrumentationPlan):
    def __init__(self, primitive: Primitive, addr: int):
        super().__init__(primitive, TechniqueKind.DPI)
        self.addr = addr
        self.site: probes.ProbeSite | None = None
        self._final_count: int | None = None
        self.actions = [f"inject counting trampoline at {addr:#x}",
                        "counter: 64-bit in-target cell on the stub page"]

    def arm(self, t: TargetProcess) -> None:
        plan = probes.plan_probe_site(t, self.addr)
        self.site = probes.inject_probe(t, plan)

    def event_count(self, t: TargetProcess) -> int:
        if self._final_count is not None:
            return self._final_count
        if self.site is None or not t.state.is_stopped:
            return 0
        return probes.read_counter(t, self.site)

    def teardown(self, t: TargetProcess) -> None:
        if self.site is not None and self.site.active and t.state.is_stopped:
            self._final_count = probes.read_counter(t, self.site)
            probes.remove_probe(t, self.site)


class StepPlan(InstrumentationPlan):
    """Single-step driver; owns the whole measurement window."""

    owns_window_loop = True

    def __init__(self, primitive: Primitive,
                 classes: frozenset | None = None):
        super().__init__(primitive, TechniqueKind.SINGLE_STEP)
        self.classes = classes
        self.count = 0
        if classes is None:
            self.actions = ["drive single-step over the window, count every step"]
        else:
            self.actions = [f"drive single-step, count opcode classes {sorted(classes)}"]

    def run_window(self, t: TargetProcess, stop_pc: int | None,
                   caps: Caps) -> traps.StepReport:
        observer = None
        if self.classes is not None:
            from .x86 import decode_one
            classes = self.classes
            counted = [0]
            match_cache: dict[int, bool] = {}

            def observer(pc, first, _t=t):
                hit = match_cache.get(pc)
                if hit is None:
                    insn = decode_one(_t.read_memory(pc, 16))
                    hit = insn is not None and insn.cls in classes
                    match_cache[pc] = hit
                if hit:
                    counted[0] += 1

        report = traps.drive_single_step(t, cap=caps.single_step,
                                         observer=observer, stop_pc=stop_pc)
        if self.classes is None:
            self.count = report.steps_executed
        else:
            self.count = counted[0]
        self.truncated = report.truncated
        return report

    def event_count(self, t: TargetProcess) -> int:
        return self.count


def build_plan(prim: Primitive, tech: TechniqueKind, t: TargetProcess | None = None,
               *, watch_len: int = 8, allow_multislot: bool = False) -> InstrumentationPlan:
    """Concrete plan for (primitive, technique); errors exactly where the
    matrix has no capability or the platform lacks the partial mechanism."""
    cap = capability(tech, prim)
    if cap.level is CapabilityLevel.NONE:
        raise CapabilityError(
            f"{tech.value} cannot instrument {PRIMITIVE_NAMES[type(prim)]}")

    if tech is TechniqueKind.SW_BREAKPOINT:
        return SwBpPlan(prim, prim.addr)
    if tech is TechniqueKind.DPI:
        return DpiPlan(prim, prim.addr)
    if tech is TechniqueKind.SINGLE_STEP:
        if isinstance(prim, ExecAll):
            return StepPlan(prim)
        return StepPlan(prim, classes=prim.classes)
    if tech is TechniqueKind.PAGE_FAULT:
        if isinstance(prim, ExecSingle):
            return PageTrapPlan(prim, prim.addr, prim.addr + 1, "exec")
        if isinstance(prim, ExecRange):
            return PageTrapPlan(prim, prim.lo, prim.hi, "exec")
        if isinstance(prim, RwSingle):
            return PageTrapPlan(prim, prim.addr, prim.addr + 1, "readwrite")
        return PageTrapPlan(prim, prim.lo, prim.hi, "readwrite")
    if tech is TechniqueKind.HW_BREAKPOINT:
        if isinstance(prim, ExecSingle):
            return HwPlan(prim, [(prim.addr, "exec", 1)])
        if isinstance(prim, RwSingle):
            return HwPlan(prim, [(prim.addr, "readwrite", watch_len)])
        # Ranges need PowerPC-style ranged registers.  The opt-in multi-slot
        # emulation covers small ranges with up to four aligned watches.
        if not allow_multislot:
            raise PlatformError(cap.note)
        if isinstance(prim, RwRange):
            watches = _cover_range_with_slots(prim.lo, prim.hi)
            if watches is not None:
                return HwPlan(prim, watches)
            raise PlatformError(
                "range not coverable by four aligned debug slots")
        raise PlatformError(cap.note)
    raise CapabilityError(f"unknown technique {tech!r}")


def _cover_range_with_slots(lo: int, hi: int) -> list[tuple[int, str, int]] | None:
    """Cover [lo, hi) with at most four naturally aligned 1/2/4/8-byte watches."""
    watches: list[tuple[int, str, int]] = []
    addr = lo
    while addr < hi:
        if len(watches) == 4:
            return None
        for length in (8, 4, 2, 1):
            if addr % length == 0 and addr + length <= hi:
                watches.append((addr, "readwrite", length))
                addr += length
                break
        else:
            length = 1
            watches.append((addr, "readwrite", 1))
            addr += 1
    return watches


def capability_rows() -> list[tuple[str, str, str, str]]:
    """Machine-readable matrix rows: (primitive, technique, level, note)."""
    rows = []
    for kind in PRIMITIVE_KINDS:
        for tech in TechniqueKind:
            cap = MATRIX[kind][tech]
            rows.append((PRIMITIVE_NAMES[kind], tech.value,
                         cap.level.value, cap.note))
    return rows


def capability_table() -> str:
    """Fixed-layout text table of the capability matrix."""
    headers = ["primitive"] + [t.value for t in TechniqueKind]
    mark = {CapabilityLevel.FULL: "full", CapabilityLevel.PARTIAL: "partial",
            CapabilityLevel.NONE: "-"}
    lines = []
    widths = [14, 8, 13, 13, 11, 10]
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    for kind in PRIMITIVE_KINDS:
        cells = [PRIMITIVE_NAMES[kind]]
        for tech in TechniqueKind:
            cells.append(mark[MATRIX[kind][tech].level])
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    notes = [(PRIMITIVE_NAMES[kind], tech.value, MATRIX[kind][tech].note)
             for kind in PRIMITIVE_KINDS for tech in TechniqueKind
             if MATRIX[kind][tech].note]
    lines.append("")
    for primitive, tech, note in notes:
        lines.append(f"partial: {primitive} / {tech}: {note}")
    return "\n".join(lines)
