"""Statistics oracles: every routine is checked against an independent
recomputation (numpy / closed forms) plus the worked examples."""

from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trapbench import analysis
from trapbench.errors import (BadBaseline, BadCount, DegenerateInput,
                              EmptyInput)

finite = st.floats(min_value=-1e6, max_value=1e6,
                   allow_nan=False, allow_infinity=False)


class TestMeanStd:
    def test_worked_example(self):
        assert analysis.mean_std([10, 12, 14]) == (12.0, 2.0)

    def test_single_sample(self):
        assert analysis.mean_std([5]) == (5.0, 0.0)

    def test_empty(self):
        with pytest.raises(EmptyInput):
            analysis.mean_std([])

    def test_against_numpy(self):
        rng = random.Random(7)
        for _ in range(100):
            xs = [rng.uniform(-100, 100) for _ in range(rng.randint(2, 40))]
            mean, std = analysis.mean_std(xs)
            assert mean == pytest.approx(np.mean(xs), rel=1e-12)
            assert std == pytest.approx(np.std(xs, ddof=1), rel=1e-9)

    @given(st.lists(finite, min_size=1, max_size=30),
           st.floats(min_value=1e-3, max_value=1e3))
    @settings(max_examples=60)
    def test_scale_equivariance(self, xs, c):
        mean, std = analysis.mean_std(xs)
        mean_c, std_c = analysis.mean_std([c * x for x in xs])
        assert mean_c == pytest.approx(c * mean, rel=1e-9, abs=1e-9)
        assert std_c == pytest.approx(c * std, rel=1e-9, abs=1e-9)


class TestNormalize:
    def test_identity_at_100m(self):
        assert analysis.normalize_per_100m(3.5, 1e8) == 3.5

    def test_arithmetic(self):
        assert analysis.normalize_per_100m(50, 5e9) == pytest.approx(1.0)

    def test_zero_count(self):
        with pytest.raises(BadCount):
            analysis.normalize_per_100m(1.0, 0)

    @given(finite, finite, st.floats(min_value=1, max_value=1e12))
    @settings(max_examples=60)
    def test_linearity(self, t1, t2, n):
        lhs = analysis.normalize_per_100m(t1 + t2, n)
        rhs = (analysis.normalize_per_100m(t1, n)
               + analysis.normalize_per_100m(t2, n))
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


class TestOverheadRatio:
    def test_twelve_x(self):
        assert analysis.overhead_ratio(12 * 3.0, 3.0) == pytest.approx(12.0)

    def test_unity(self):
        assert analysis.overhead_ratio(4.2, 4.2) == 1.0

    def test_zero_baseline(self):
        with pytest.raises(BadBaseline):
            analysis.overhead_ratio(1.0, 0.0)


class TestLinfit:
    def test_exact_collinear(self):
        fit = analysis.linfit([(1, 2), (2, 4), (3, 6)])
        assert fit.slope == pytest.approx(2.0)
        assert fit.intercept == pytest.approx(0.0, abs=1e-12)
        assert fit.r2 == pytest.approx(1.0)

    def test_constant_y(self):
        fit = analysis.linfit([(0, 1), (1, 1), (2, 1)])
        assert fit.slope == pytest.approx(0.0, abs=1e-12)
        assert fit.intercept == pytest.approx(1.0)
        assert fit.r2 == 1.0          # SStot == 0 rule

    def test_degenerate(self):
        with pytest.raises(DegenerateInput):
            analysis.linfit([(1, 2)])
        with pytest.raises(DegenerateInput):
            analysis.linfit([(3, 1), (3, 5)])

    def test_against_numpy(self):
        rng = random.Random(11)
        for _ in range(100):
            n = rng.randint(2, 50)
            xs = [rng.uniform(0, 1000) for _ in range(n)]
            if len(set(xs)) < 2:
                continue
            ys = [3.5 * x + rng.gauss(0, 25) for x in xs]
            fit = analysis.linfit(list(zip(xs, ys)))
            slope, intercept = np.polyfit(xs, ys, 1)
            assert fit.slope == pytest.approx(slope, rel=1e-9)
            assert fit.intercept == pytest.approx(intercept, rel=1e-9, abs=1e-9)
            ss_res = sum((y - (slope * x + intercept)) ** 2
                         for x, y in zip(xs, ys))
            ss_tot = sum((y - np.mean(ys)) ** 2 for y in ys)
            assert fit.r2 == pytest.approx(1 - ss_res / ss_tot, rel=1e-9)

    @given(st.lists(st.tuples(finite, finite), min_size=2, max_size=25))
    @settings(max_examples=60)
    def test_residuals_sum_to_zero(self, pts):
        xs = [p[0] for p in pts]
        if max(xs) - min(xs) < 1e-6:
            return
        fit = analysis.linfit(pts)
        resid = math.fsum(y - fit.value(x) for x, y in pts)
        scale = max(1.0, math.fsum(abs(y) for _, y in pts))
        assert abs(resid) <= 1e-9 * scale * len(pts)


class TestCuttingPoint:
    def test_hundred_event_crossover(self):
        a = analysis.RegressionFit(slope=0.0, intercept=10.0, r2=1.0, n_points=2)
        b = analysis.RegressionFit(slope=0.1, intercept=0.0, r2=1.0, n_points=2)
        assert analysis.cutting_point(a, b).x_star == pytest.approx(100.0)

    def test_parallel(self):
        a = analysis.RegressionFit(slope=2.0, intercept=1.0, r2=1.0, n_points=2)
        assert analysis.cutting_point(a, a).parallel

    def test_intersection_substitutes_back(self):
        rng = random.Random(3)
        for _ in range(100):
            a = analysis.RegressionFit(rng.uniform(-5, 5), rng.uniform(-50, 50), 1.0, 2)
            b = analysis.RegressionFit(rng.uniform(-5, 5), rng.uniform(-50, 50), 1.0, 2)
            cp = analysis.cutting_point(a, b)
            if cp.parallel:
                continue
            ya, yb = a.value(cp.x_star), b.value(cp.x_star)
            assert ya == pytest.approx(yb, rel=1e-9, abs=1e-9)

    @given(st.tuples(finite, finite), st.tuples(finite, finite))
    @settings(max_examples=60)
    def test_symmetry(self, fa, fb):
        a = analysis.RegressionFit(fa[0], fa[1], 1.0, 2)
        b = analysis.RegressionFit(fb[0], fb[1], 1.0, 2)
        ab, ba = analysis.cutting_point(a, b), analysis.cutting_point(b, a)
        assert ab.parallel == ba.parallel
        if not ab.parallel:
            assert ab.x_star == pytest.approx(ba.x_star, rel=1e-9, abs=1e-9)


def _record(spec_id, secs, events=0, technique="sw_breakpoint", **kw):
    rec = {"spec_id": spec_id, "technique": technique, "primitive": "exec_single@0x1",
           "combined_cpu_ns": int(secs * 1e9), "wall_ns": int(secs * 1e9),
           "event_count": events, "truncated": False, "error": None}
    rec.update(kw)
    return rec


class TestReports:
    def test_table_cell_formatting(self):
        recs = [_record("s", t) for t in (10, 12, 14)]
        out = analysis.emit_report(recs, "table")
        assert "12.00±2.00" in out

    def test_empty_records(self):
        out = analysis.emit_report([], "table")
        assert out.startswith("spec")
        assert len(out.strip().splitlines()) == 1

    def test_plotcsv_row_count(self):
        recs = []
        for i, freq in enumerate((10, 100, 1000)):
            for rep in range(2):
                recs.append(_record(f"s{i}", 1.0 + freq / 100, events=freq,
                                    total_instr=100_000_000))
        out = analysis.emit_report(recs, "plotcsv")
        lines = out.strip().splitlines()
        assert lines[0] == "technique,primitive,freq_per_100m,norm_time_s,r2_of_fit"
        assert len(lines) - 1 == 6

    def test_plotcsv_excludes_truncated(self):
        recs = [_record("a", 1.0, events=10, total_instr=10**8),
                _record("b", 2.0, events=20, total_instr=10**8, truncated=True),
                _record("c", 3.0, events=30, total_instr=10**8)]
        out = analysis.emit_report(recs, "plotcsv")
        assert len(out.strip().splitlines()) - 1 == 2

    def test_mean_matches_independent_recompute(self):
        rng = random.Random(5)
        samples = [rng.uniform(1, 20) for _ in range(10)]
        recs = [_record("x", s) for s in samples]
        agg = analysis.aggregate_records(recs)[0]
        assert agg.n == 10
        assert agg.mean_s == pytest.approx(np.mean(samples), rel=1e-9)
        assert agg.std_s == pytest.approx(np.std(samples, ddof=1), rel=1e-9)


def test_frequency_points_per_spec_flag():
    recs = [_record("w1", 1.0, events=10, total_instr=10**8),
            _record("w2", 2.0, events=20, total_instr=10**8)]
    pooled = analysis.frequency_points(recs)
    assert set(pooled) == {"sw_breakpoint"} and len(pooled["sw_breakpoint"]) == 2
    split = analysis.frequency_points(recs, per_spec=True)
    assert set(split) == {"sw_breakpoint|w1", "sw_breakpoint|w2"}
