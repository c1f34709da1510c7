"""Experiment orchestration: run (workload x technique x primitive) matrices
with repetitions, measure the main->exit window, enforce event caps, and
persist one JSON record per run.

Measurement protocol per run:
  1. spawn the target stopped, arm software breakpoints at main and at the
     exit anchor (these two measurement traps are never counted as events);
  2. continue to the main trap, consume it (pc rolled back, byte restored);
  3. arm the instrumentation plan -- arming cost stays outside the window;
  4. sample clocks + /proc, run the window servicing plan events;
  5. on the exit trap: sample clocks + /proc, read the event counter,
     tear down, and let the target run to completion;
  6. diff exit status and stdout against a cached native reference run.

Event caps truncate the *counted* events: when a plan reaches its cap the
instrumentation is torn down, the run continues uninstrumented to the exit
anchor, and the record is flagged truncated with event_count == cap.
"""

from __future__ import annotations

import hashlib
import json
import os
import shlex
import signal
import subprocess
import tempfile
import time
from base64 import b64decode, b64encode
from dataclasses import dataclass, field

from . import primitives as prim
from . import traps
from .elffile import ElfFile
from .errors import AdapterError, SpawnError, TransparencyError, WaitError
from .primitives import Caps, InstrumentationPlan, TechniqueKind, build_plan
from .target import ProcSnapshot, StopKind, TargetProcess, spawn_stopped
from .workload import WorkloadMetadata, expected_counts

TECHNIQUE_NONE = "none"
TECHNIQUE_NATIVE = "native"
TECHNIQUE_EXTERNAL = "external"


@dataclass
class ExperimentSpec:
    spec_id: str
    workload_exe: str
    technique: str                      # TechniqueKind value, none, native, external
    primitive: prim.Primitive | None = None
    metadata: WorkloadMetadata | None = None
    args: list[str] = field(default_factory=list)
    repetitions: int = 10
    caps: Caps = field(default_factory=Caps)
    external_template: str | None = None
    main_symbol: str = "main"
    exit_symbol: str | None = None      # default: metadata exit anchor or "exit"
    watch_len: int = 8
    total_instr: int | None = None      # override for non-generated targets

    def __post_init__(self):
        if self.technique == TECHNIQUE_NONE and self.primitive is not None:
            raise ValueError("baseline specs take no primitive")
        if self.caps.single_step <= 0 or self.caps.page_fault <= 0:
            raise ValueError("caps must be positive")
        if self.total_instr is None and self.metadata is not None:
            self.total_instr = self.metadata.total_instr


@dataclass
class RunRecord:
    spec_id: str
    rep: int
    technique: str
    primitive: str | None
    wall_ns: int | None
    cpu_child_ns: int | None
    cpu_tracer_ns: int | None
    combined_cpu_ns: int | None
    event_count: int
    expected_count: int | None
    truncated: bool
    exit_status: int | None
    stdout_sha256: str | None
    total_instr: int | None
    t_start_ns: int | None
    t_end_ns: int | None
    timestamp_ns: int
    proc_before: dict | None = None
    proc_after: dict | None = None
    external: bool = False
    contended: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return dict(vars(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__})


def primitive_label(p: prim.Primitive | None) -> str | None:
    if p is None:
        return None
    if isinstance(p, prim.ExecSingle):
        return f"exec_single@{p.addr:#x}"
    if isinstance(p, prim.ExecRange):
        return f"exec_range[{p.lo:#x},{p.hi:#x})"
    if isinstance(p, prim.ExecAll):
        return "exec_all"
    if isinstance(p, prim.ExecType):
        return f"exec_type({','.join(sorted(p.classes))})"
    if isinstance(p, prim.RwSingle):
        return f"rw_single@{p.addr:#x}"
    if isinstance(p, prim.RwRange):
        return f"rw_range[{p.lo:#x},{p.hi:#x})"
    return str(p)


def _snapshot_dict(snap: ProcSnapshot) -> dict:
    return {
        "stat": b64encode(snap.stat_raw).decode(),
        "status": b64encode(snap.status_raw).decode(),
        "wall_ns": snap.timestamp.wall_ns,
        "cpu_child_ns": snap.timestamp.cpu_child_ns,
        "cpu_tracer_ns": snap.timestamp.cpu_tracer_ns,
    }


def snapshot_bytes(d: dict) -> tuple[bytes, bytes]:
    return b64decode(d["stat"]), b64decode(d["status"])


# --- native reference ---------------------------------------------------------

_native_cache: dict[str, dict] = {}


def native_reference(exe: str, args: tuple[str, ...] = (),
                     refresh: bool = False) -> dict:
    """Run the workload with no tracer at all; cached per (exe, args)."""
    exe = os.path.realpath(exe)
    key = (exe, tuple(args))
    if not refresh and key in _native_cache:
        return _native_cache[key]
    with tempfile.NamedTemporaryFile(delete=False) as out:
        out_path = out.name
    try:
        t0 = time.monotonic_ns()
        pid = os.fork()
        if pid == 0:
            fd = os.open(out_path, os.O_WRONLY | os.O_TRUNC)
            os.dup2(fd, 1)
            os.close(fd)
            try:
                os.execve(exe, [exe, *args], {})
            except OSError:
                pass
            os._exit(127)
        _, status, ru = os.wait4(pid, 0)
        t1 = time.monotonic_ns()
        with open(out_path, "rb") as f:
            stdout = f.read()
    finally:
        os.unlink(out_path)
    code = os.waitstatus_to_exitcode(status)
    if code == 127:
        raise SpawnError(f"{exe}: native reference exec failed")
    ref = {
        "exit_status": code,
        "stdout_sha256": hashlib.sha256(stdout).hexdigest(),
        "stdout": stdout,
        "wall_ns": t1 - t0,
        "cpu_ns": int((ru.ru_utime + ru.ru_stime) * 1e9),
    }
    _native_cache[key] = ref
    return ref


# --- window machinery -----------------------------------------------------------

def _consume_measure_hit(t: TargetProcess, bp: traps.SoftBreakpoint) -> None:
    """Roll back the pc and retire a measurement breakpoint without stepping,
    so the anchored instruction still lies ahead of the clock edge."""
    rf = t.get_gp_registers()
    if rf.pc != bp.addr + 1:
        raise WaitError(f"expected measurement trap at {bp.addr:#x}, pc={rf.pc:#x}")
    rf.pc = bp.addr
    t.set_gp_registers(rf)
    traps.disarm_sw_breakpoint(t, bp)


def _resolve_anchor(spec: ExperimentSpec, symbol: str) -> int:
    if spec.metadata is not None:
        if symbol == spec.main_symbol:
            return spec.metadata.main_addr
        if spec.exit_symbol in (None, "prog_exit") and symbol == "prog_exit":
            return spec.metadata.exit_addr
    elf = ElfFile(spec.workload_exe)
    return elf.lookup(symbol).value


def _run_to_exit_trap(t: TargetProcess, exit_addr: int,
                      plan: InstrumentationPlan | None, caps: Caps) -> bool:
    """Continue, dispatching plan events, until the exit anchor traps.

    Returns True when the run was truncated by an event cap."""
    truncated = False
    active = plan
    deliver = 0
    while True:
        ev = t.resume_wait("continue", deliver_signal=deliver)
        deliver = 0
        if ev.kind == StopKind.EXITED:
            return truncated
        if ev.kind == StopKind.BREAKPOINT_TRAP and ev.pc == exit_addr + 1:
            return truncated
        consumed = active.handle(t, ev) if active is not None else False
        if t.state.is_terminal:
            return truncated
        if not consumed:
            if ev.kind == StopKind.BREAKPOINT_TRAP:
                deliver = signal.SIGTRAP          # foreign trap: pass through
            elif ev.signo is not None:
                deliver = ev.signo                # unrelated fault or signal
        if active is not None and active.cap_reached(caps):
            active.teardown(t)
            active = None
            truncated = True


def run_experiment(spec: ExperimentSpec, rep: int) -> RunRecord:
    """One measured run; the target is always reaped, even on errors."""
    if spec.technique == TECHNIQUE_NATIVE:
        return _run_native(spec, rep)
    if spec.technique == TECHNIQUE_EXTERNAL:
        return run_external(spec.external_template, spec, rep)

    if spec.technique == TECHNIQUE_NONE:
        plan: InstrumentationPlan = prim.BaselinePlan()
    else:
        tech = TechniqueKind(spec.technique)
        plan = build_plan(spec.primitive, tech, watch_len=spec.watch_len)

    native = native_reference(spec.workload_exe, tuple(spec.args))
    with tempfile.NamedTemporaryFile(delete=False) as out:
        out_path = out.name
    try:
        return _run_traced(spec, rep, plan, native, out_path)
    finally:
        if os.path.exists(out_path):
            os.unlink(out_path)


def _run_traced(spec: ExperimentSpec, rep: int, plan: InstrumentationPlan,
                native: dict, out_path: str) -> RunRecord:
    t = spawn_stopped(spec.workload_exe, args=spec.args, disable_aslr=True,
                      stdout_path=out_path)
    try:
        main_addr = _resolve_anchor(spec, spec.main_symbol)
        exit_sym = spec.exit_symbol or ("prog_exit" if spec.metadata else "exit")
        exit_addr = (spec.metadata.exit_addr if spec.metadata and exit_sym == "prog_exit"
                     else _resolve_anchor(spec, exit_sym))

        main_bp = traps.arm_sw_breakpoint(t, main_addr)
        exit_bp = traps.arm_sw_breakpoint(t, exit_addr)
        ev = t.resume_wait("continue")
        if ev.kind != StopKind.BREAKPOINT_TRAP or ev.pc != main_addr + 1:
            raise WaitError(f"target never reached main: {ev}")
        _consume_measure_hit(t, main_bp)

        plan.arm(t)
        proc_before = t.snapshot_proc()
        clocks0 = t.read_clocks()

        if plan.owns_window_loop:
            report = plan.run_window(t, stop_pc=exit_addr, caps=spec.caps)
            truncated = report.truncated
            if t.state.is_stopped and t.read_pc() != exit_addr:
                _run_to_exit_trap(t, exit_addr, None, spec.caps)
        else:
            truncated = _run_to_exit_trap(t, exit_addr, plan, spec.caps)

        clocks1 = t.read_clocks()
        at_exit_stop = t.state.is_stopped
        proc_after = t.snapshot_proc() if at_exit_stop else None
        event_count = plan.event_count(t)
        plan.teardown(t)

        if at_exit_stop:
            rf = t.get_gp_registers()
            if rf.pc == exit_addr + 1:
                _consume_measure_hit(t, exit_bp)
            elif exit_bp.armed:
                traps.disarm_sw_breakpoint(t, exit_bp)
            fin = t.resume_wait("continue")
            while fin.kind != StopKind.EXITED:
                fin = t.resume_wait("continue",
                                    deliver_signal=fin.signo or 0)
        exit_status = t.exit_code
    finally:
        t.reap()

    with open(out_path, "rb") as f:
        stdout = f.read()
    stdout_sha = hashlib.sha256(stdout).hexdigest()

    if exit_status != native["exit_status"]:
        raise TransparencyError(
            f"{spec.spec_id}: exit status {exit_status} != native {native['exit_status']}")
    if stdout_sha != native["stdout_sha256"]:
        raise TransparencyError(f"{spec.spec_id}: stdout diverged from native run")

    expected = None
    if spec.metadata is not None and spec.primitive is not None:
        expected = expected_counts(spec.metadata, spec.primitive)

    return RunRecord(
        spec_id=spec.spec_id, rep=rep, technique=spec.technique,
        primitive=primitive_label(spec.primitive),
        wall_ns=clocks1.wall_ns - clocks0.wall_ns,
        cpu_child_ns=clocks1.cpu_child_ns - clocks0.cpu_child_ns,
        cpu_tracer_ns=clocks1.cpu_tracer_ns - clocks0.cpu_tracer_ns,
        combined_cpu_ns=(clocks1.cpu_child_ns - clocks0.cpu_child_ns)
                        + (clocks1.cpu_tracer_ns - clocks0.cpu_tracer_ns),
        event_count=event_count, expected_count=expected, truncated=truncated,
        exit_status=exit_status, stdout_sha256=stdout_sha,
        total_instr=spec.total_instr,
        t_start_ns=clocks0.wall_ns, t_end_ns=clocks1.wall_ns,
        timestamp_ns=time.time_ns(),
        proc_before=_snapshot_dict(proc_before),
        proc_after=_snapshot_dict(proc_after) if proc_after else None,
    )


def _run_native(spec: ExperimentSpec, rep: int) -> RunRecord:
    ref = native_reference(spec.workload_exe, tuple(spec.args), refresh=True)
    return RunRecord(
        spec_id=spec.spec_id, rep=rep, technique=TECHNIQUE_NATIVE,
        primitive=None,
        wall_ns=ref["wall_ns"], cpu_child_ns=ref["cpu_ns"], cpu_tracer_ns=0,
        combined_cpu_ns=ref["cpu_ns"],
        event_count=0, expected_count=None, truncated=False,
        exit_status=ref["exit_status"], stdout_sha256=ref["stdout_sha256"],
        total_instr=spec.total_instr,
        t_start_ns=None, t_end_ns=None, timestamp_ns=time.time_ns(),
    )


def run_external(template: str | None, spec: ExperimentSpec, rep: int) -> RunRecord:
    """Adapter for out-of-scope engines: the tool measures its own window and
    reports key=value lines on a named output file."""
    if not template:
        raise AdapterError("external spec without a command template")
    with tempfile.NamedTemporaryFile(mode="r", suffix=".kv", delete=False) as out:
        out_path = out.name
    try:
        cmd = [part.format(workload=spec.workload_exe, out=out_path)
               for part in shlex.split(template)]
        proc = subprocess.run(cmd, capture_output=True, timeout=3600)
        if not os.path.exists(out_path) or os.path.getsize(out_path) == 0:
            raise AdapterError(
                f"external tool produced no output file (rc={proc.returncode})")
        fields: dict[str, str] = {}
        with open(out_path) as f:
            for line in f:
                line = line.strip()
                if not line or "=" not in line:
                    continue
                key, _, value = line.partition("=")
                fields[key.strip()] = value.strip()
    finally:
        try:
            os.unlink(out_path)
        except OSError:
            pass
    try:
        wall_ns = int(fields["wall_ns"])
        event_count = int(fields["event_count"])
    except (KeyError, ValueError) as e:
        raise AdapterError(f"malformed external record: {e}") from e
    cpu_child = int(fields["cpu_child_ns"]) if "cpu_child_ns" in fields else None
    exit_status = int(fields["exit_status"]) if "exit_status" in fields else None
    return RunRecord(
        spec_id=spec.spec_id, rep=rep, technique=TECHNIQUE_EXTERNAL,
        primitive=primitive_label(spec.primitive),
        wall_ns=wall_ns, cpu_child_ns=cpu_child, cpu_tracer_ns=None,
        combined_cpu_ns=None,
        event_count=event_count, expected_count=None,
        truncated=fields.get("truncated", "0") in ("1", "true"),
        exit_status=exit_status, stdout_sha256=None,
        total_instr=spec.total_instr,
        t_start_ns=None, t_end_ns=None, timestamp_ns=time.time_ns(),
        external=True,
    )


# --- record store ------------------------------------------------------------------

class ResultStore:
    """Append-only JSONL record log; every append is durable before return."""

    def __init__(self, path: str):
        self.path = path

    def append(self, rec: RunRecord) -> None:
        line = json.dumps(rec.to_dict(), sort_keys=True)
        with open(self.path, "a") as f:
            f.write(line + "\n")
            f.flush()
            os.fsync(f.fileno())

    def load(self) -> list[dict]:
        """Records in append order; a torn final line is ignored."""
        if not os.path.exists(self.path):
            return []
        with open(self.path) as f:
            lines = f.read().splitlines()
        records = []
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                if i == len(lines) - 1:
                    break
                raise OSError(f"{self.path}: corrupt record at line {i + 1}")
        return records


def _run_spec(spec: ExperimentSpec, store: ResultStore | None,
              lock=None, contended: bool = False) -> list[RunRecord]:
    records = []
    for rep in range(spec.repetitions):
        try:
            rec = run_experiment(spec, rep)
        except Exception as e:              # error record, matrix continues
            rec = RunRecord(
                spec_id=spec.spec_id, rep=rep, technique=spec.technique,
                primitive=primitive_label(spec.primitive),
                wall_ns=None, cpu_child_ns=None, cpu_tracer_ns=None,
                combined_cpu_ns=None, event_count=0, expected_count=None,
                truncated=False, exit_status=None, stdout_sha256=None,
                total_instr=None, t_start_ns=None, t_end_ns=None,
                timestamp_ns=time.time_ns(),
                error=f"{type(e).__name__}: {e}")
        rec.contended = contended
        records.append(rec)
        if store is not None:
            if lock is not None:
                with lock:
                    store.append(rec)
            else:
                store.append(rec)
    return records


def run_matrix(specs: list[ExperimentSpec], store: ResultStore | None = None,
               parallel: int = 0) -> list[RunRecord]:
    """`repetitions` records per spec; per-run failures become error records
    and the matrix continues.

    Sequential by default so measured runs never overlap.  With parallel > 1
    each spec runs on its own worker thread (one thread drives one target,
    honoring the debug-interface threading rule) and every record is marked
    contended, since concurrent targets share the machine."""
    if parallel > 1 and len(specs) > 1:
        import threading
        from concurrent.futures import ThreadPoolExecutor
        lock = threading.Lock()
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(_run_spec, spec, store, lock, True)
                       for spec in specs]
            out: list[RunRecord] = []
            for fut in futures:
                out.extend(fut.result())
            return out
    records: list[RunRecord] = []
    for spec in specs:
        records.extend(_run_spec(spec, store))
    return records


# --- config files --------------------------------------------------------------------

def _parse_addr(value, meta: WorkloadMetadata | None, exe: str) -> int:
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        if value.startswith("0x"):
            return int(value, 16)
        if meta is not None:
            named = {
                "main": meta.main_addr, "prog_exit": meta.exit_addr,
                "hot_insn": meta.hot_insn_addr, "hot_cell": meta.hot_cell_addr,
                "second_cell": meta.second_cell_addr,
            }
            if value in named and named[value] is not None:
                return named[value]
        return ElfFile(exe).lookup(value).value
    raise ValueError(f"cannot parse address {value!r}")


def _parse_primitive(d: dict | None, meta: WorkloadMetadata | None,
                     exe: str) -> prim.Primitive | None:
    if d is None:
        return None
    kind = d["kind"]
    if kind == "exec_all":
        return prim.ExecAll()
    if kind == "exec_type":
        classes = frozenset(d.get("classes", prim.ExecType().classes))
        return prim.ExecType(classes)
    if kind in ("exec_single", "rw_single"):
        addr = _parse_addr(d["target"], meta, exe)
        return prim.ExecSingle(addr) if kind == "exec_single" else prim.RwSingle(addr)
    if kind in ("exec_range", "rw_range"):
        if "length" in d:
            lo = _parse_addr(d["target"], meta, exe)
            hi = lo + int(d["length"])
        else:
            lo = _parse_addr(d["lo"], meta, exe)
            hi = _parse_addr(d["hi"], meta, exe)
        return prim.ExecRange(lo, hi) if kind == "exec_range" else prim.RwRange(lo, hi)
    raise ValueError(f"unknown primitive kind {kind!r}")


def load_config(path: str) -> list[ExperimentSpec]:
    with open(path) as f:
        cfg = json.load(f)
    workloads = {}
    for name, w in cfg.get("workloads", {}).items():
        meta = None
        if w.get("metadata"):
            with open(w["metadata"]) as mf:
                meta = WorkloadMetadata.from_json(mf.read())
        workloads[name] = (w["exe"], meta)
    default_reps = cfg.get("default_repetitions", 10)
    specs = []
    for s in cfg["specs"]:
        exe, meta = workloads[s["workload"]]
        caps_d = s.get("caps", {})
        caps = Caps(single_step=caps_d.get("single_step", traps.SINGLE_STEP_CAP),
                    page_fault=caps_d.get("page_fault", traps.PAGE_FAULT_CAP))
        technique = s["technique"]
        specs.append(ExperimentSpec(
            spec_id=s["id"],
            workload_exe=exe,
            technique=technique,
            primitive=_parse_primitive(s.get("primitive"), meta, exe),
            metadata=meta,
            args=[str(a) for a in s.get("args", [])],
            repetitions=s.get("repetitions", default_reps),
            caps=caps,
            external_template=s.get("command"),
            exit_symbol=s.get("exit_symbol"),
            watch_len=s.get("watch_len", 8),
            total_instr=s.get("total_instr"),
        ))
    return specs
