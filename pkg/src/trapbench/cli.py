"""trapbench command line: workload generation, experiment matrices,
reports, the capability matrix, and ad-hoc traces."""

from __future__ import annotations

import json
import os
import sys

import click

from . import analysis, harness, primitives, workload
from .errors import TrapbenchError


@click.group()
def main():
    """Trap-and-probe instrumentation toolkit and overhead benchmark."""


@main.command()
@click.option("--k-exec", type=int, default=0, help="hot instruction executions")
@click.option("--k-mem", type=int, default=None,
              help="sets both read and write counts of the hot cell")
@click.option("--k-read", type=int, default=0, help="hot cell reads")
@click.option("--k-write", type=int, default=0, help="hot cell writes")
@click.option("--k-second", type=int, default=0, help="second cell writes")
@click.option("--total-instr", type=int, required=True,
              help="exact dynamic instructions between main and exit")
@click.option("--pattern", type=click.Choice(workload.PATTERNS),
              default="tight-loop")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--name", default="workload")
def gen(k_exec, k_mem, k_read, k_write, k_second, total_instr, pattern,
        out_dir, name):
    """Emit a synthetic workload executable plus its metadata JSON."""
    if k_mem is not None:
        k_read = k_write = k_mem
    params = workload.WorkloadParams(
        total_instr=total_instr, k_exec=k_exec, k_read=k_read,
        k_write=k_write, k_second=k_second, pattern=pattern)
    image, meta = workload.emit_workload(params)
    os.makedirs(out_dir, exist_ok=True)
    exe = os.path.join(out_dir, name)
    with open(exe, "wb") as f:
        f.write(image)
    os.chmod(exe, 0o755)
    meta_path = exe + ".meta.json"
    with open(meta_path, "w") as f:
        f.write(meta.to_json())
    click.echo(f"wrote {exe} and {meta_path}")
    click.echo(f"main={meta.main_addr:#x} hot_insn={meta.hot_insn_addr:#x} "
               f"hot_cell={meta.hot_cell_addr:#x} exit={meta.exit_addr:#x}")


@main.command()
@click.option("--format", "fmt", type=click.Choice(["table", "rows"]),
              default="table")
def capabilities(fmt):
    """Print the technique/primitive capability matrix."""
    if fmt == "table":
        click.echo(primitives.capability_table())
    else:
        for row in primitives.capability_rows():
            click.echo(json.dumps({"primitive": row[0], "technique": row[1],
                                   "level": row[2], "note": row[3]}))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def run(config_path, out_path):
    """Run every spec in the config; one JSON record line per run."""
    specs = harness.load_config(config_path)
    with open(config_path) as f:
        parallel = json.load(f).get("parallel", 0)
    store = harness.ResultStore(out_path)
    records = harness.run_matrix(specs, store, parallel=parallel)
    ok = sum(1 for r in records if r.error is None)
    click.echo(f"{ok}/{len(records)} runs recorded to {out_path}")
    failures = [r for r in records if r.error is not None]
    for r in failures[:10]:
        click.echo(f"  error {r.spec_id}[{r.rep}]: {r.error}", err=True)
    if failures:
        sys.exit(1)


@main.command()
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--format", "fmt", type=click.Choice(["table", "csv", "plotcsv"]),
              default="table")
def report(in_path, fmt):
    """Aggregate a record log into tables or figure-reproduction CSV."""
    records = harness.ResultStore(in_path).load()
    click.echo(analysis.emit_report(records, fmt), nl=False)


@main.command()
@click.argument("exe", type=click.Path(exists=True))
@click.option("--technique", "-t", required=True,
              type=click.Choice([t.value for t in primitives.TechniqueKind] + ["none"]))
@click.option("--primitive", "-p", "prim_kind", default="exec_single",
              type=click.Choice(list(primitives.PRIMITIVE_NAMES.values())))
@click.option("--target", default=None,
              help="symbol name or 0xADDR (single/range primitives)")
@click.option("--length", type=int, default=None, help="range length in bytes")
@click.option("--metadata", "meta_path", type=click.Path(exists=True), default=None)
@click.option("--step-cap", type=int, default=None)
@click.option("--fault-cap", type=int, default=None)
def trace(exe, technique, prim_kind, target, length, meta_path, step_cap, fault_cap):
    """One instrumented run of EXE; prints the run record as JSON."""
    meta = None
    if meta_path:
        with open(meta_path) as f:
            meta = workload.WorkloadMetadata.from_json(f.read())
    elif os.path.exists(exe + ".meta.json"):
        with open(exe + ".meta.json") as f:
            meta = workload.WorkloadMetadata.from_json(f.read())
    prim_dict = None
    if technique != "none":
        prim_dict = {"kind": prim_kind}
        if prim_kind in ("exec_single", "rw_single"):
            if target is None:
                raise click.UsageError("--target required for this primitive")
            prim_dict["target"] = target
        elif prim_kind in ("exec_range", "rw_range"):
            if target is None or length is None:
                raise click.UsageError("--target and --length required")
            prim_dict.update(target=target, length=length)
    caps = primitives.Caps()
    if step_cap:
        caps.single_step = step_cap
    if fault_cap:
        caps.page_fault = fault_cap
    spec = harness.ExperimentSpec(
        spec_id=f"trace:{os.path.basename(exe)}:{technique}",
        workload_exe=exe,
        technique=technique,
        primitive=harness._parse_primitive(prim_dict, meta, exe),
        metadata=meta, repetitions=1, caps=caps)
    try:
        rec = harness.run_experiment(spec, 0)
    except TrapbenchError as e:
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        sys.exit(1)
    d = rec.to_dict()
    d.pop("proc_before", None)
    d.pop("proc_after", None)
    click.echo(json.dumps(d, indent=1))


if __name__ == "__main__":
    main()
