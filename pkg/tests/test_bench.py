import csv
import math

import pytest

from linattn import InsufficientData, bench
from linattn.bench import (
    CSV_HEADER,
    BenchRecord,
    Impl,
    Pass,
    SweepConfig,
    VerifyConfig,
    emit_csv,
    fit_points,
    fit_slope,
    read_csv,
    run_sweep,
    verify,
)
from linattn.tensor import Mask


def _cfg(**kw):
    base = dict(B=1, H=1, N=[64, 128, 256], D=[16], repeats=3)
    base.update(kw)
    return SweepConfig(**base)


def _record(n, t, status="ok"):
    return BenchRecord(Impl.FAST, Pass.FORWARD, Mask.CAUSAL, 1, 1, n, 16, 1, 1, "f64", t, 10, 1.5, status=status)


class TestSweep:
    def test_records_per_point(self):
        recs = run_sweep(_cfg(N=[1024, 2048, 4096], D=[32]))
        assert [r.N for r in recs] == [1024, 2048, 4096]
        times = [r.wall_time_s for r in recs]
        assert all(b >= 0.9 * a for a, b in zip(times, times[1:]))
        assert all(r.peak_transient_scalars > 0 for r in recs)

    def test_both_passes(self):
        recs = run_sweep(_cfg(passes="both"))
        assert [r.pass_ for r in recs[:2]] == [Pass.FORWARD, Pass.BACKWARD]
        assert len(recs) == 6

    def test_quadratic_guard(self):
        recs = run_sweep(_cfg(impls=["quad"], N=[2048, 4096, 8192], D=[4]))
        assert [r.N for r in recs] == [2048, 4096]

    def test_backward_only_for_fast(self):
        recs = run_sweep(_cfg(impls=["fast", "quad", "softmax", "recurrent"], passes="bwd"))
        assert {r.impl for r in recs} == {Impl.FAST}

    def test_recurrent_is_causal_only(self):
        assert run_sweep(_cfg(impls=["recurrent"], mask="none")) == []
        assert len(run_sweep(_cfg(impls=["recurrent"]))) == 3

    def test_oracles_agree_on_checksum(self):
        recs = run_sweep(_cfg(impls=["fast", "quad", "recurrent"], N=[32, 48, 64]))
        by_impl = {}
        for r in recs:
            by_impl.setdefault(r.N, []).append(r.checksum)
        for sums in by_impl.values():
            assert max(sums) - min(sums) <= 1e-9

    def test_empty_sweep(self):
        assert run_sweep(_cfg(N=[])) == []

    def test_memory_budget(self):
        recs = run_sweep(_cfg(mem_budget_scalars=20000))
        assert [r.status for r in recs] == ["ok", "ok", "OOM-skipped"]
        assert math.isnan(recs[-1].wall_time_s)

    def test_sequential_fallback_matches_interleaved(self, monkeypatch):
        cfg = _cfg(passes="both", mem_budget_scalars=20000)
        interleaved = run_sweep(cfg)
        monkeypatch.setattr(bench, "INTERLEAVE_MAX_SCALARS", 0)
        sequential = run_sweep(cfg)
        key = lambda r: (r.pass_, r.N, r.status, r.checksum if r.status == "ok" else None)  # noqa: E731
        assert [key(r) for r in interleaved] == [key(r) for r in sequential]

    def test_d_sweep(self):
        recs = run_sweep(_cfg(sweep_axis="D", N=[64], D=[8, 16, 32]))
        assert [(r.N, r.D) for r in recs] == [(64, 8), (64, 16), (64, 32)]

    def test_float32(self):
        recs = run_sweep(_cfg(precision="f32", N=[64]))
        assert recs[0].precision == "f32"

    @pytest.mark.parametrize("kw", [
        {"L": 3}, {"impls": ["flash"]}, {"passes": "sideways"}, {"precision": "f16"},
        {"repeats": 2}, {"sweep_axis": "B"}, {"D": [16, 32]}, {"mask": "diagonal"},
    ])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            run_sweep(_cfg(**kw))

    def test_seed_reproduces_checksums(self):
        first = [r.checksum for r in run_sweep(_cfg(passes="both", workers=1))]
        second = [r.checksum for r in run_sweep(_cfg(passes="both", workers=1))]
        assert first == second

    def test_default_config(self):
        cfg = SweepConfig()
        assert (cfg.B, cfg.H, cfg.D, cfg.seed, cfg.normalize, cfg.a, cfg.b) == (4, 16, [128], 0, True, 1.0, 1.0)


class TestFit:
    def test_exact_line(self):
        fit = fit_points([(1, 1), (10, 10), (100, 100)])
        assert fit.slope == pytest.approx(1.0, abs=1e-12)
        assert fit.r2 == pytest.approx(1.0, abs=1e-12)

    def test_exact_quadratic(self):
        assert fit_points([(1, 1), (10, 100), (100, 10000)]).slope == pytest.approx(2.0, abs=1e-12)

    def test_from_records(self):
        recs = [_record(n, 1e-6 * n) for n in (100, 200, 400, 800)]
        fit = fit_slope(recs, "N")
        assert fit.slope == pytest.approx(1.0, abs=1e-12)
        assert fit.impl == "FastLA" and fit.axis == "N"

    def test_skips_oom(self):
        recs = [_record(n, 1e-6 * n) for n in (100, 200, 400)] + [_record(800, math.nan, "OOM-skipped")]
        assert len(fit_slope(recs).points) == 3

    @pytest.mark.parametrize("pts", [[], [(1, 1), (2, 2)], [(1, 1), (1, 2), (2, 3)]])
    def test_insufficient(self, pts):
        with pytest.raises(InsufficientData):
            fit_points(pts)


class TestCsv:
    def test_header_only(self, tmp_path):
        path = tmp_path / "empty.csv"
        emit_csv([], path)
        assert path.read_text() == ",".join(CSV_HEADER) + "\n"

    def test_line_count(self, tmp_path):
        path = tmp_path / "three.csv"
        emit_csv([_record(n, 0.5) for n in (1, 2, 3)], path)
        assert len(path.read_text().splitlines()) == 4

    def test_number_format(self, tmp_path):
        path = tmp_path / "fmt.csv"
        emit_csv([_record(10, 1.0 / 3.0)], path)
        row = next(csv.DictReader(path.open()))
        assert row["wall_time_s"] == "0.333333333"
        assert row["impl"] == "FastLA" and row["pass"] == "Forward" and row["precision"] == "F64"

    def test_oom_row(self, tmp_path):
        path = tmp_path / "oom.csv"
        emit_csv([_record(10, math.nan, "OOM-skipped")], path)
        row = next(csv.DictReader(path.open()))
        assert row["wall_time_s"] == row["checksum"] == "OOM"

    def test_round_trip(self, tmp_path):
        path = tmp_path / "rt.csv"
        recs = [_record(n, 0.25 * n) for n in (4, 8)] + [_record(16, math.nan, "OOM-skipped")]
        emit_csv(recs, path)
        back = read_csv(path)
        assert [(r.N, r.wall_time_s, r.status) for r in back[:2]] == [(4, 1.0, "ok"), (8, 2.0, "ok")]
        assert back[2].status == "OOM-skipped"

    def test_io_error(self, tmp_path):
        with pytest.raises(OSError):
            emit_csv([], tmp_path / "missing" / "x.csv")


SMALL = dict(forward_cases=10, gradient_cases=6, recurrent_cases=5, workspace_lengths=(256, 512, 1024))


class TestVerify:
    def test_all_suites_pass(self):
        report = verify(VerifyConfig(**SMALL))
        assert report.passed
        assert [r.name for r in report.results] == ["forward", "recurrent", "gradients", "plan", "workspace"]

    def test_suite_filter(self):
        report = verify(VerifyConfig(suites=("forward",), **SMALL))
        assert [r.name for r in report.results] == ["forward"]
        assert report.results[0].cases == 10

    def test_beta_sign_flip_fails_gradients(self, beta_sign_flip):
        report = verify(VerifyConfig(suites=("gradients",), **SMALL))
        assert not report.passed
        assert report.results[0].max_deviation > 1e-3

    def test_off_by_one_fails_forward(self, prefix_off_by_one):
        assert not verify(VerifyConfig(suites=("forward",), **SMALL)).passed

    def test_a_term_omission_fails_gradients(self, a_term_omission):
        assert not verify(VerifyConfig(suites=("gradients",), **SMALL)).passed

    def test_summary_dict(self):
        d = verify(VerifyConfig(suites=("recurrent",), **SMALL)).as_dict()
        assert d["passed"] is True and d["suites"][0]["name"] == "recurrent"
