"""Statistics over run records: mean/std tables, per-100M-instruction
normalization, least-squares trend fits, cutting points, and report
rendering.

All functions are pure; fits use ordinary least squares on raw values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import BadBaseline, BadCount, DegenerateInput, EmptyInput

PER_100M = 1e8


@dataclass(frozen=True)
class Aggregate:
    spec_id: str
    n: int
    mean_s: float
    std_s: float
    mean_events: float
    truncated_any: bool


@dataclass(frozen=True)
class RegressionFit:
    slope: float
    intercept: float
    r2: float
    n_points: int

    def value(self, x: float) -> float:
        return self.slope * x + self.intercept


_PARALLEL_EPS = 1e-12


@dataclass(frozen=True)
class CuttingPoint:
    x_star: float | None            # None marks parallel lines

    @property
    def parallel(self) -> bool:
        return self.x_star is None


def mean_std(samples: list[float]) -> tuple[float, float]:
    """Arithmetic mean and sample (n-1) standard deviation; std 0 for n=1."""
    if not samples:
        raise EmptyInput("mean_std over an empty sample")
    n = len(samples)
    mean = math.fsum(samples) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((x - mean) ** 2 for x in samples) / (n - 1)
    return mean, math.sqrt(var)


def normalize_per_100m(duration_s: float, instr_count: float) -> float:
    """Scale a duration to a 100-million-instruction basis."""
    if instr_count <= 0:
        raise BadCount(f"instruction count must be positive, got {instr_count}")
    return duration_s * PER_100M / instr_count


def overhead_ratio(measured_s: float, native_s: float) -> float:
    if native_s <= 0:
        raise BadBaseline(f"native reference must be positive, got {native_s}")
    return measured_s / native_s


def linfit(points: list[tuple[float, float]]) -> RegressionFit:
    """Ordinary least squares y = slope*x + intercept over raw values."""
    n = len(points)
    if n < 2:
        raise DegenerateInput("linfit needs at least two points")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    if sxx == 0.0:
        raise DegenerateInput("linfit needs varying x values")
    sxy = math.fsum((x - mx) * (y - my) for x, y in points)
    slope = sxy / sxx
    intercept = my - slope * mx
    sstot = math.fsum((y - my) ** 2 for y in ys)
    if sstot == 0.0:
        r2 = 1.0
    else:
        ssres = math.fsum((y - (slope * x + intercept)) ** 2 for x, y in points)
        r2 = 1.0 - ssres / sstot
    return RegressionFit(slope=slope, intercept=intercept, r2=r2, n_points=n)


def cutting_point(a: RegressionFit, b: RegressionFit) -> CuttingPoint:
    """Event frequency where two fitted overhead lines intersect."""
    dslope = a.slope - b.slope
    scale = max(abs(a.slope), abs(b.slope), 1.0)
    if abs(dslope) <= _PARALLEL_EPS * scale:
        return CuttingPoint(None)
    return CuttingPoint((b.intercept - a.intercept) / dslope)


# --- report rendering -----------------------------------------------------------

def aggregate_records(records: list[dict]) -> list[Aggregate]:
    """Group records by spec id, preserving first-appearance order."""
    groups: dict[str, list[dict]] = {}
    for rec in records:
        if rec.get("error"):
            continue
        groups.setdefault(rec["spec_id"], []).append(rec)
    out = []
    for spec_id, recs in groups.items():
        times = [r["combined_cpu_ns"] / 1e9 if r.get("combined_cpu_ns") is not None
                 else r["wall_ns"] / 1e9 for r in recs]
        mean, std = mean_std(times)
        events = [float(r.get("event_count", 0)) for r in recs]
        out.append(Aggregate(
            spec_id=spec_id, n=len(recs), mean_s=mean, std_s=std,
            mean_events=math.fsum(events) / len(events),
            truncated_any=any(r.get("truncated") for r in recs)))
    return out


def frequency_points(records: list[dict],
                     include_truncated: bool = False,
                     per_spec: bool = False) -> dict[str, list[tuple[float, float]]]:
    """(events per 100M instr, normalized seconds) points grouped by
    technique, or by technique|spec when per_spec is set (separate trend
    lines per workload instead of the default pooled fit).

    Truncated runs are excluded by default: their event counts are capped,
    not natural.
    """
    points: dict[str, list[tuple[float, float]]] = {}
    for rec in records:
        if rec.get("error") or rec.get("technique") in (None, "none", "native"):
            continue
        if rec.get("truncated") and not include_truncated:
            continue
        instr = rec.get("total_instr")
        if not instr:
            continue
        secs = (rec["combined_cpu_ns"] if rec.get("combined_cpu_ns") is not None
                else rec["wall_ns"]) / 1e9
        freq = rec["event_count"] * PER_100M / instr
        norm = normalize_per_100m(secs, instr)
        key = rec["technique"]
        if per_spec:
            key = f"{key}|{rec.get('spec_id')}"
        points.setdefault(key, []).append((freq, norm))
    return points


def render_table(records: list[dict]) -> str:
    """Appendix-style table: one row per spec, cells "mean±std" in seconds."""
    aggs = aggregate_records(records)
    lines = [f"{'spec':<40} {'n':>3} {'time_s':>16} {'events':>14} {'trunc':>5}"]
    for a in aggs:
        cell = f"{a.mean_s:.2f}±{a.std_s:.2f}"
        lines.append(f"{a.spec_id:<40} {a.n:>3} {cell:>16} "
                     f"{a.mean_events:>14.1f} {'yes' if a.truncated_any else 'no':>5}")
    return "\n".join(lines) + "\n"


def render_csv(records: list[dict]) -> str:
    lines = ["spec_id,n,mean_s,std_s,mean_events,truncated_any"]
    for a in aggregate_records(records):
        lines.append(f"{a.spec_id},{a.n},{a.mean_s:.9f},{a.std_s:.9f},"
                     f"{a.mean_events:.3f},{int(a.truncated_any)}")
    return "\n".join(lines) + "\n"


def render_plotcsv(records: list[dict]) -> str:
    """Figure-reproduction rows: technique,primitive,freq_per_100m,norm_time_s,r2_of_fit."""
    by_tech = frequency_points(records)
    fits = {}
    for tech, pts in by_tech.items():
        xs = {p[0] for p in pts}
        if len(pts) >= 2 and len(xs) >= 2:
            fits[tech] = linfit(pts)
    prim_by_tech: dict[str, str] = {}
    for rec in records:
        if rec.get("technique") and rec.get("primitive"):
            prim_by_tech.setdefault(rec["technique"], rec["primitive"])
    lines = ["technique,primitive,freq_per_100m,norm_time_s,r2_of_fit"]
    for tech, pts in by_tech.items():
        r2 = f"{fits[tech].r2:.6f}" if tech in fits else ""
        primitive = prim_by_tech.get(tech, "")
        for freq, norm in pts:
            lines.append(f"{tech},{primitive},{freq:.6f},{norm:.9f},{r2}")
    return "\n".join(lines) + "\n"


def emit_report(records: list[dict], fmt: str = "table") -> str:
    if fmt == "table":
        return render_table(records)
    if fmt == "csv":
        return render_csv(records)
    if fmt == "plotcsv":
        return render_plotcsv(records)
    raise ValueError(f"unknown report format {fmt!r}")
