#!/usr/bin/env python3
"""Build and verify the C fixture corpus.

Each fixture is compiled non-relocatable at a fixed base with reproducible
flags, checked for byte-identical rebuilds and deterministic stdout, has its
exported symbols resolved, and has the hot-marker execution count verified
empirically by single-stepping the main->exit window once.  The resulting
manifest.json records paths, symbol addresses, nominal event counts, stdout
checksums, and (for the two sweep fixtures) an instruction-count model
window(k, w) = base + k*per_outer + k*w*per_inner used to size frequency
sweeps.

Usage:  python3 fixtures/build.py [--out fixtures/build]
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys

from trapbench import ElfFile, spawn_stopped, traps

HERE = os.path.dirname(os.path.abspath(__file__))

CFLAGS = ["-O0", "-g0", "-static", "-no-pie", "-fno-pie", "-Wall", "-Werror"]
REQUIRED_SYMBOLS = ("main", "hot_insn_marker", "hot_cell", "exit")
DEFAULT_ARGS = ["300", "5"]

FIXTURES = [
    {"name": "int_mix", "kind": "integer", "model": True},
    {"name": "ptr_chase", "kind": "memory", "model": False},
    {"name": "branch_mix", "kind": "branch", "model": False},
    {"name": "fp_poly", "kind": "floating-point", "model": True},
]


class BuildError(Exception):
    pass


class ManifestError(Exception):
    pass


def sha256_file(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def compile_fixture(name: str, out_dir: str, tag: str = "") -> str:
    src = os.path.join(HERE, "src", f"{name}.c")
    binary = os.path.join(out_dir, name + tag)
    cmd = ["gcc", *CFLAGS, "-o", binary, src]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise BuildError(f"{name}: gcc failed:\n{proc.stderr}")
    return binary


def run_fixture(binary: str, args: list[str]) -> tuple[int, bytes]:
    proc = subprocess.run([binary, *args], capture_output=True)
    return proc.returncode, proc.stdout


def resolve_symbols(binary: str) -> dict[str, int]:
    elf = ElfFile(binary)
    out = {}
    for name in REQUIRED_SYMBOLS:
        try:
            out[name] = elf.lookup(name).value
        except Exception as e:
            raise ManifestError(f"{binary}: symbol {name!r} missing: {e}") from e
    return out


def step_window(binary: str, args: list[str],
                count_pc: int | None = None) -> tuple[int, int]:
    """Single-step the main->exit window; returns (steps, count_pc hits)."""
    syms = resolve_symbols(binary)
    t = spawn_stopped(binary, args=args)
    try:
        bp = traps.arm_sw_breakpoint(t, syms["main"])
        ev = t.resume_wait()
        if ev.pc != syms["main"] + 1:
            raise BuildError(f"{binary}: never reached main ({ev})")
        rf = t.get_gp_registers()
        rf.pc = syms["main"]
        t.set_gp_registers(rf)
        traps.disarm_sw_breakpoint(t, bp)
        hits = [0]
        observer = None
        if count_pc is not None:
            def observer(pc, _first, _h=hits, _target=count_pc):
                if pc == _target:
                    _h[0] += 1
        report = traps.drive_single_step(t, cap=50_000_000,
                                         observer=observer,
                                         stop_pc=syms["exit"])
        if report.truncated:
            raise BuildError(f"{binary}: window exceeded step budget")
        return report.steps_executed, hits[0]
    finally:
        t.reap()


def measure_instr_model(binary: str) -> dict[str, float]:
    """Solve window(k,w) = base + k*per_outer + k*w*per_inner exactly."""
    m1, _ = step_window(binary, ["100", "4"])
    m2, _ = step_window(binary, ["200", "4"])
    m3, _ = step_window(binary, ["100", "12"])
    per_inner = (m3 - m1) / (100 * 8)
    per_outer = (m2 - m1) / 100 - 4 * per_inner
    base = m1 - 100 * per_outer - 400 * per_inner
    model = {"base": base, "per_outer": per_outer, "per_inner": per_inner}
    # libc printf/atol costs wobble with the digits being formatted, so the
    # window is affine in (k, w) only to within a few hundred instructions.
    check, _ = step_window(binary, ["150", "8"])
    predicted = base + 150 * per_outer + 150 * 8 * per_inner
    if abs(check - predicted) > max(300.0, 0.02 * check):
        raise BuildError(f"{binary}: instruction model off "
                         f"(predicted {predicted}, measured {check})")
    return model


def build_corpus(out_dir: str, verbose: bool = True) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for fx in FIXTURES:
        name = fx["name"]
        if verbose:
            print(f"[{name}] compiling", flush=True)
        binary = compile_fixture(name, out_dir)
        rebuilt = compile_fixture(name, out_dir, tag=".rebuild")
        if sha256_file(binary) != sha256_file(rebuilt):
            raise BuildError(f"{name}: rebuild is not byte-identical")
        os.unlink(rebuilt)

        rc1, out1 = run_fixture(binary, DEFAULT_ARGS)
        rc2, out2 = run_fixture(binary, DEFAULT_ARGS)
        if rc1 != 0 or rc2 != 0:
            raise BuildError(f"{name}: nonzero exit ({rc1}, {rc2})")
        if out1 != out2:
            raise BuildError(f"{name}: nondeterministic stdout")

        symbols = resolve_symbols(binary)
        k = int(DEFAULT_ARGS[0])
        if verbose:
            print(f"[{name}] stepping window to verify marker count", flush=True)
        steps, marker_hits = step_window(binary, DEFAULT_ARGS,
                                         count_pc=symbols["hot_insn_marker"])
        if abs(marker_hits - k) > max(1, k // 100):
            raise ManifestError(
                f"{name}: marker executed {marker_hits}x, nominal {k}")

        model = None
        if fx["model"]:
            if verbose:
                print(f"[{name}] measuring instruction model", flush=True)
            model = measure_instr_model(binary)

        entries.append({
            "name": name,
            "kind": fx["kind"],
            "source": os.path.relpath(os.path.join(HERE, "src", f"{name}.c"),
                                      HERE),
            "build_flags": CFLAGS,
            "binary": os.path.relpath(binary, HERE),
            "binary_sha256": sha256_file(binary),
            "symbols": symbols,
            "default_args": DEFAULT_ARGS,
            "stdout_sha256": hashlib.sha256(out1).hexdigest(),
            # the cell is also written once at init and read once for the
            # final checksum, hence k+1 of each
            "nominal": {
                "hot_insn_marker": k,
                "hot_cell_reads": k + 1,
                "hot_cell_writes": k + 1,
            },
            "window_steps_at_default": steps,
            "measured_marker_hits": marker_hits,
            "instr_model": model,
        })
        if verbose:
            print(f"[{name}] ok: {marker_hits} marker hits, "
                  f"{steps} window instructions", flush=True)

    manifest = {"compiler": subprocess.run(
        ["gcc", "--version"], capture_output=True, text=True).stdout.splitlines()[0],
        "fixtures": entries}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
    if verbose:
        print(f"manifest written to {path}")
    return manifest


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=os.path.join(HERE, "build"))
    args = ap.parse_args()
    try:
        build_corpus(args.out)
    except (BuildError, ManifestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
