"""Acceptance criteria, one test per criterion (criterion 2, 3, and 6 carry
per-technique subchecks).  Every test prints a [criterion N] PASS/FAIL line.

Heavy runs use generator workloads only; event counts assert exact equality
against the analytic metadata.  Hardware-breakpoint subchecks require a
kernel that implements debug registers; on kernels that silently discard
them (gVisor) those subchecks fail with HwDebugUnavailable rather than being
weakened.
"""

from __future__ import annotations

import math
import os
import random
import time
from contextlib import contextmanager

import numpy as np
import pytest

from trapbench import analysis, harness, traps
from trapbench import primitives as pr
from trapbench.errors import PlatformError
from trapbench.harness import ExperimentSpec, ResultStore, run_experiment, run_matrix
from trapbench.primitives import TechniqueKind, capability
from trapbench.target import spawn_stopped
from trapbench.workload import WorkloadParams, emit_workload

from trap_test_helpers import run_to_main


@contextmanager
def criterion(n, desc):
    t0 = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"\n[criterion {n}] FAIL {desc} ({time.monotonic() - t0:.1f}s)")
        raise
    print(f"\n[criterion {n}] PASS {desc} ({time.monotonic() - t0:.1f}s)")


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def build(bench_dir, name, **kw):
    image, meta = emit_workload(WorkloadParams(**kw))
    exe = bench_dir / name
    exe.write_bytes(image)
    os.chmod(exe, 0o755)
    return str(exe), meta


def spec_for(exe, meta, technique, primitive=None, **kw):
    return ExperimentSpec(
        spec_id=kw.pop("spec_id", f"{technique}"),
        workload_exe=exe, technique=technique, primitive=primitive,
        metadata=meta, repetitions=kw.pop("repetitions", 1), **kw)


# --- criterion 1: capability matrix ------------------------------------------------

def test_criterion_1_capability_matrix():
    published = {
        "exec_single": ("full", "full", "full", "none", "partial"),
        "exec_range":  ("none", "none", "partial", "none", "full"),
        "exec_all":    ("none", "none", "none", "full", "none"),
        "exec_type":   ("none", "none", "none", "partial", "none"),
        "rw_single":   ("none", "none", "full", "none", "partial"),
        "rw_range":    ("none", "none", "partial", "none", "full"),
    }
    order = (TechniqueKind.DPI, TechniqueKind.SW_BREAKPOINT,
             TechniqueKind.HW_BREAKPOINT, TechniqueKind.SINGLE_STEP,
             TechniqueKind.PAGE_FAULT)
    with criterion(1, "capability matrix cell-for-cell"):
        for kind, name in pr.PRIMITIVE_NAMES.items():
            row = tuple(capability(t, kind).level.value for t in order)
            assert row == published[name], name
        table = pr.capability_table()
        for name in published:
            assert name in table


# --- criterion 2: cross-technique count agreement ----------------------------------

K_EXEC, K_READ, K_WRITE = 1000, 600, 400
_c2_elapsed: dict[str, float] = {}


@pytest.fixture(scope="module")
def c2_workload(bench_dir):
    return build(bench_dir, "c2", total_instr=1_000_000,
                 k_exec=K_EXEC, k_read=K_READ, k_write=K_WRITE)


def _timed(name, fn):
    t0 = time.monotonic()
    try:
        return fn()
    finally:
        _c2_elapsed[name] = time.monotonic() - t0


def test_criterion_2_sw_breakpoint(c2_workload):
    exe, meta = c2_workload
    with criterion(2, "sw-breakpoint hit count == 1000"):
        rec = _timed("sw", lambda: run_experiment(
            spec_for(exe, meta, "sw_breakpoint",
                     pr.ExecSingle(meta.hot_insn_addr)), 0))
        assert rec.event_count == K_EXEC == rec.expected_count


def test_criterion_2_hw_exec_slot(c2_workload):
    exe, meta = c2_workload
    with criterion(2, "hw exec-slot hit count == 1000"):
        rec = _timed("hw", lambda: run_experiment(
            spec_for(exe, meta, "hw_breakpoint",
                     pr.ExecSingle(meta.hot_insn_addr)), 0))
        assert rec.event_count == K_EXEC


def test_criterion_2_probe_counter(c2_workload):
    exe, meta = c2_workload
    with criterion(2, "probe counter == 1000"):
        rec = _timed("dpi", lambda: run_experiment(
            spec_for(exe, meta, "dpi", pr.ExecSingle(meta.hot_insn_addr)), 0))
        assert rec.event_count == K_EXEC


def test_criterion_2_page_fault_filtered(c2_workload):
    exe, meta = c2_workload
    with criterion(2, "filtered page-fault count == 1000"):
        rec = _timed("pf", lambda: run_experiment(
            spec_for(exe, meta, "page_fault",
                     pr.ExecSingle(meta.hot_insn_addr)), 0))
        assert rec.event_count == K_EXEC


def test_criterion_2_single_step_observer(c2_workload):
    exe, meta = c2_workload
    with criterion(2, "single-step observer count at hot == 1000"):
        def run():
            t = spawn_stopped(exe)
            try:
                run_to_main(t, meta)
                hot = meta.hot_insn_addr
                hits = [0]

                def obs(pc, first, _h=hits):
                    if pc == hot:
                        _h[0] += 1

                report = traps.drive_single_step(t, stop_pc=meta.exit_addr,
                                                 observer=obs)
                return report, hits[0]
            finally:
                t.reap()

        report, hits = _timed("ss", run)
        assert report.steps_executed == 1_000_000
        assert hits == K_EXEC


def test_criterion_2_hw_watchpoint_rw(c2_workload):
    exe, meta = c2_workload
    with criterion(2, f"hw watchpoint rw count == {K_READ + K_WRITE}"):
        rec = _timed("hw_rw", lambda: run_experiment(
            spec_for(exe, meta, "hw_breakpoint",
                     pr.RwSingle(meta.hot_cell_addr)), 0))
        assert rec.event_count == K_READ + K_WRITE


def test_criterion_2_page_fault_rw(c2_workload):
    exe, meta = c2_workload
    with criterion(2, f"page-fault rw count == {K_READ + K_WRITE}"):
        rec = _timed("pf_rw", lambda: run_experiment(
            spec_for(exe, meta, "page_fault",
                     pr.RwSingle(meta.hot_cell_addr)), 0))
        assert rec.event_count == K_READ + K_WRITE == rec.expected_count


def test_criterion_2_runtime_budget():
    with criterion(2, "count-agreement runs fit the 60 s budget"):
        total = sum(_c2_elapsed.values())
        print(f"  leg times: { {k: round(v, 2) for k, v in _c2_elapsed.items()} }")
        assert total < 60.0, f"criterion 2 runs took {total:.1f}s"


# --- criterion 3: transparency ------------------------------------------------------

def test_criterion_3_transparency(bench_dir):
    patterns = [
        dict(pattern="tight-loop"),
        dict(pattern="strided"),
        dict(pattern="two-cells-one-page", k_second=25),
    ]
    with criterion(3, "stdout/exit byte-identical to native for every plan"):
        t0 = time.monotonic()
        runs = skipped = 0
        for pat in patterns:
            exe, meta = build(bench_dir, f"c3-{pat['pattern']}",
                              total_instr=60_000, k_exec=40, k_read=30,
                              k_write=20, **pat)
            native = harness.native_reference(exe)
            hot_page = meta.hot_page()
            hot_range = pr.ExecRange(hot_page, hot_page + 64)
            cell_page = meta.hot_cell_addr & ~0xFFF
            plans = [
                ("dpi", pr.ExecSingle(meta.hot_insn_addr)),
                ("sw_breakpoint", pr.ExecSingle(meta.hot_insn_addr)),
                ("hw_breakpoint", pr.ExecSingle(meta.hot_insn_addr)),
                ("hw_breakpoint", pr.RwSingle(meta.hot_cell_addr)),
                ("single_step", pr.ExecAll()),
                ("single_step", pr.ExecType()),
                ("page_fault", pr.ExecSingle(meta.hot_insn_addr)),
                ("page_fault", hot_range),
                ("page_fault", pr.RwSingle(meta.hot_cell_addr)),
                ("page_fault", pr.RwRange(cell_page, cell_page + 0x1000)),
            ]
            for tech, primitive in plans:
                try:
                    rec = run_experiment(
                        spec_for(exe, meta, tech, primitive,
                                 spec_id=f"c3:{pat['pattern']}:{tech}"), 0)
                except PlatformError as e:
                    skipped += 1
                    print(f"  note: {tech}/{type(primitive).__name__} "
                          f"unavailable here: {e}")
                    continue
                runs += 1
                assert rec.exit_status == native["exit_status"]
                assert rec.stdout_sha256 == native["stdout_sha256"]
        elapsed = time.monotonic() - t0
        print(f"  {runs} instrumented runs diffed, {skipped} platform-skipped, "
              f"{elapsed:.1f}s")
        assert runs >= 24
        assert elapsed < 120.0


# --- criterion 4: event caps ---------------------------------------------------------

def test_criterion_4_single_step_cap(bench_dir):
    with criterion(4, "single-step truncates at exactly 2,000,000"):
        exe, meta = build(bench_dir, "c4ss", total_instr=5_000_000, k_exec=10)
        rec = run_experiment(spec_for(exe, meta, "single_step", pr.ExecAll()), 0)
        assert rec.truncated
        assert rec.event_count == 2_000_000
        assert rec.exit_status == 0


def test_criterion_4_page_fault_cap(bench_dir):
    with criterion(4, "page-fault run truncates at exactly 200,000"):
        exe, meta = build(bench_dir, "c4pf", total_instr=2_000_000,
                          k_read=125_000, k_write=125_000)
        rec = run_experiment(
            spec_for(exe, meta, "page_fault", pr.RwSingle(meta.hot_cell_addr)), 0)
        assert rec.truncated
        assert rec.event_count == 200_000
        assert rec.exit_status == 0


# --- criterion 5: scaling reproduction ----------------------------------------------

def test_criterion_5_frequency_sweep(bench_dir, tmp_path):
    freqs = [10, 100, 1_000, 10_000, 100_000]
    reps = 2
    with criterion(5, "sweep slopes: sw/pf linear (r2>=0.9), dpi < sw"):
        t0 = time.monotonic()
        store = ResultStore(str(tmp_path / "sweep.jsonl"))
        specs = []
        for f in freqs:
            exe, meta = build(bench_dir, f"c5-{f}", total_instr=100_000_000,
                              k_exec=f, k_read=f)
            specs += [
                spec_for(exe, meta, "sw_breakpoint",
                         pr.ExecSingle(meta.hot_insn_addr),
                         spec_id=f"sw:{f}", repetitions=reps),
                spec_for(exe, meta, "dpi", pr.ExecSingle(meta.hot_insn_addr),
                         spec_id=f"dpi:{f}", repetitions=reps),
                spec_for(exe, meta, "page_fault",
                         pr.RwSingle(meta.hot_cell_addr),
                         spec_id=f"pf:{f}", repetitions=reps),
            ]
        records = run_matrix(specs, store)
        errors = [r for r in records if r.error]
        assert not errors, errors[:3]
        for rec in records:
            assert rec.event_count == rec.expected_count

        points = analysis.frequency_points([r.to_dict() for r in records])
        fits = {tech: analysis.linfit(pts) for tech, pts in points.items()}
        sw, dpi, pf = (fits["sw_breakpoint"], fits["dpi"], fits["page_fault"])
        print(f"  sw:  slope={sw.slope:.3e} s/event  r2={sw.r2:.4f}")
        print(f"  pf:  slope={pf.slope:.3e} s/event  r2={pf.r2:.4f}")
        print(f"  dpi: slope={dpi.slope:.3e} s/event  r2={dpi.r2:.4f}")
        cp = analysis.cutting_point(dpi, sw)
        if not cp.parallel:
            print(f"  dpi/sw cutting point: {cp.x_star:.1f} events per 100M")
        assert sw.slope > 0 and sw.r2 >= 0.9
        assert pf.slope > 0 and pf.r2 >= 0.9
        assert dpi.slope < sw.slope
        elapsed = time.monotonic() - t0
        print(f"  sweep wall time {elapsed:.0f}s")
        assert elapsed < 900.0


# --- criterion 6: baseline overheads --------------------------------------------------

def test_criterion_6_baseline_overheads(bench_dir):
    reps = 3
    with criterion(6, "armed-idle plans <= 1.2x native combined CPU"):
        exe, meta = build(bench_dir, "c6", total_instr=2_000_000_000)
        native = harness.native_reference(exe, refresh=True)
        native_cpu = native["cpu_ns"]
        assert native_cpu > 100_000_000, "baseline workload too small to time"
        results = {}
        failures = {}
        for tech, primitive in [
            ("dpi", pr.ExecSingle(meta.hot_insn_addr)),
            ("sw_breakpoint", pr.ExecSingle(meta.hot_insn_addr)),
            ("hw_breakpoint", pr.ExecSingle(meta.hot_insn_addr)),
            ("page_fault", pr.RwSingle(meta.hot_cell_addr)),
        ]:
            try:
                recs = [run_experiment(spec_for(exe, meta, tech, primitive), i)
                        for i in range(reps)]
            except PlatformError as e:
                failures[tech] = str(e)
                continue
            combined = sum(r.combined_cpu_ns for r in recs) / reps
            ratio = analysis.overhead_ratio(combined, native_cpu)
            results[tech] = ratio
            assert all(r.event_count == 0 for r in recs), tech
        for tech, ratio in results.items():
            print(f"  {tech}: combined cpu = {ratio:.3f}x native")
        for tech, why in failures.items():
            print(f"  {tech}: UNAVAILABLE ({why})")
        for tech, ratio in results.items():
            assert ratio <= 1.2, f"{tech} baseline ratio {ratio:.3f}"
        # hardware breakpoints are part of this criterion
        assert "hw_breakpoint" in results, \
            f"hw baseline unavailable: {failures.get('hw_breakpoint')}"


def test_criterion_6_single_step_magnitude(bench_dir):
    with criterion(6, "single-step >= 50x native per-instruction time"):
        exe, meta = build(bench_dir, "c6ss", total_instr=200_000)
        native = harness.native_reference(exe, refresh=True)
        native_basis_ns = max(native["cpu_ns"], native["wall_ns"], 1)
        rec = run_experiment(spec_for(exe, meta, "single_step", pr.ExecAll()), 0)
        ratio = rec.combined_cpu_ns / native_basis_ns
        print(f"  single-step normalized {ratio:.0f}x native "
              f"(window {rec.combined_cpu_ns / 1e9:.1f}s vs native "
              f"{native_basis_ns / 1e9:.4f}s whole-process)")
        assert rec.event_count == 200_000
        assert ratio >= 50


# --- criterion 7: analysis oracles ---------------------------------------------------

def test_criterion_7_analysis_oracles():
    rng = random.Random(42)
    with criterion(7, "mean/fit/cutting-point vs brute force, 1e-9 relative"):
        for _ in range(100):
            xs = [rng.uniform(-1e3, 1e3) for _ in range(rng.randint(1, 60))]
            mean, std = analysis.mean_std(xs)
            assert math.isclose(mean, float(np.mean(xs)),
                                rel_tol=1e-9, abs_tol=1e-12)
            expected_std = float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0
            assert math.isclose(std, expected_std, rel_tol=1e-9, abs_tol=1e-12)

        for _ in range(100):
            n = rng.randint(2, 60)
            pts = [(rng.uniform(0, 1e4), rng.uniform(-1e3, 1e3))
                   for _ in range(n)]
            if max(p[0] for p in pts) - min(p[0] for p in pts) < 1e-9:
                continue
            fit = analysis.linfit(pts)
            slope_np, icept_np = np.polyfit([p[0] for p in pts],
                                            [p[1] for p in pts], 1)
            assert math.isclose(fit.slope, float(slope_np),
                                rel_tol=1e-9, abs_tol=1e-9)
            assert math.isclose(fit.intercept, float(icept_np),
                                rel_tol=1e-9, abs_tol=1e-9)

        for _ in range(100):
            a = analysis.RegressionFit(rng.uniform(-10, 10),
                                       rng.uniform(-100, 100), 1.0, 2)
            b = analysis.RegressionFit(rng.uniform(-10, 10),
                                       rng.uniform(-100, 100), 1.0, 2)
            cp = analysis.cutting_point(a, b)
            if cp.parallel:
                assert abs(a.slope - b.slope) <= 1e-10
            else:
                assert math.isclose(a.value(cp.x_star), b.value(cp.x_star),
                                    rel_tol=1e-9, abs_tol=1e-9)

        cp = analysis.cutting_point(
            analysis.RegressionFit(0.0, 10.0, 1.0, 2),
            analysis.RegressionFit(0.1, 0.0, 1.0, 2))
        assert cp.x_star == 100.0


# --- criterion 8: measurement protocol -----------------------------------------------

def test_criterion_8_protocol(bench_dir, tmp_path):
    with criterion(8, "10 records per spec; table matches hand computation"):
        exe, meta = build(bench_dir, "c8", total_instr=20_000, k_exec=10)
        store = ResultStore(str(tmp_path / "c8.jsonl"))
        spec = spec_for(exe, meta, "sw_breakpoint",
                        pr.ExecSingle(meta.hot_insn_addr),
                        spec_id="c8spec", repetitions=10)
        records = run_matrix([spec], store)
        assert len(records) == 10
        assert all(r.error is None for r in records)

        loaded = store.load()
        assert len(loaded) == 10
        times = [r["combined_cpu_ns"] / 1e9 for r in loaded]
        hand_mean = sum(times) / 10
        hand_std = math.sqrt(sum((t - hand_mean) ** 2 for t in times) / 9)

        table = analysis.emit_report(loaded, "table")
        cell = f"{hand_mean:.2f}±{hand_std:.2f}"
        assert cell in table, f"expected {cell!r} in:\n{table}"
