import csv
import json

import pytest

from linattn.cli import main, read_config


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


SWEEP = ["sweep", "--B", "1", "--H", "1", "--D", "8", "--N", "32,64,96", "--repeats", "3"]


class TestSweepCommand:
    def test_writes_csv(self, tmp_path, capsys):
        path = tmp_path / "out.csv"
        code, _, _ = _run(capsys, *SWEEP, "--out", str(path))
        assert code == 0
        rows = list(csv.DictReader(path.open()))
        assert [r["N"] for r in rows] == ["32", "64", "96"]

    def test_stdout(self, capsys):
        code, out, _ = _run(capsys, *SWEEP)
        assert code == 0
        assert out.splitlines()[0].startswith("impl,pass,mask,B,H,N,D,L")

    def test_repeatable_impl(self, capsys):
        code, out, _ = _run(capsys, *SWEEP, "--impl", "fast", "--impl", "quad,softmax")
        impls = {line.split(",")[0] for line in out.splitlines()[1:]}
        assert code == 0 and impls == {"FastLA", "QuadraticLA", "Softmax"}

    def test_empty_sweep(self, capsys):
        code, out, _ = _run(capsys, "sweep", "--B", "1", "--H", "1", "--N", "", "--D", "8")
        assert code == 0 and len(out.splitlines()) == 1

    def test_invalid_blocks(self, capsys):
        code, _, err = _run(capsys, *SWEEP, "--L", "3")
        assert code == 2 and "divide" in err

    def test_unwritable_output(self, tmp_path, capsys):
        code, _, err = _run(capsys, *SWEEP, "--out", str(tmp_path / "nope" / "x.csv"))
        assert code == 2 and "cannot write" in err

    def test_on_off_flags(self, capsys):
        code, _, _ = _run(capsys, *SWEEP, "--normalize", "off", "--deterministic", "on", "--a", "2", "--b", "0.5")
        assert code == 0

    def test_memory_budget(self, capsys):
        code, out, _ = _run(capsys, *SWEEP, "--mem-budget-scalars", "1000")
        assert code == 0 and all(",OOM," in line for line in out.splitlines()[1:])

    def test_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "sweep.cfg"
        cfg.write_text("# desk run\nB=1\nH = 2\nD=8\nN=16,32,48\nrepeats=3\nimpl=fast,quad\n")
        code, out, _ = _run(capsys, "sweep", "--config", str(cfg), "--H", "1")
        rows = list(csv.DictReader(out.splitlines()))
        assert code == 0
        assert {r["H"] for r in rows} == {"1"}
        assert len(rows) == 6

    def test_config_parse_error(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("colour=blue\n")
        with pytest.raises(ValueError):
            read_config(str(cfg))

    def test_checksums_reproduce(self, capsys):
        argv = [*SWEEP, "--pass", "both", "--workers", "1", "--seed", "3"]
        _, first, _ = _run(capsys, *argv)
        _, second, _ = _run(capsys, *argv)
        col = lambda text: [r["checksum"] for r in csv.DictReader(text.splitlines())]  # noqa: E731
        assert col(first) == col(second)


class TestFitCommand:
    def test_fit(self, tmp_path, capsys):
        path = tmp_path / "s.csv"
        _run(capsys, *SWEEP, "--out", str(path), "--impl", "fast,quad")
        code, out, _ = _run(capsys, "fit", str(path))
        assert code == 0
        assert "FastLA" in out and "QuadraticLA" in out and "slope=" in out

    def test_fit_csv(self, tmp_path, capsys):
        path, fits = tmp_path / "s.csv", tmp_path / "fits.csv"
        _run(capsys, *SWEEP, "--out", str(path))
        assert _run(capsys, "fit", str(path), "--out", str(fits))[0] == 0
        assert fits.read_text().splitlines()[0] == "impl,pass,axis,slope,intercept,r2,points"

    def test_too_few_points(self, tmp_path, capsys):
        path = tmp_path / "s.csv"
        _run(capsys, "sweep", "--B", "1", "--H", "1", "--D", "8", "--N", "32,64", "--repeats", "3",
             "--out", str(path))
        code, _, err = _run(capsys, "fit", str(path))
        assert code == 1 and "need >= 3" in err

    def test_missing_file(self, tmp_path, capsys):
        assert _run(capsys, "fit", str(tmp_path / "none.csv"))[0] == 2


FAST_VERIFY = ["verify", "--forward-cases", "10", "--gradient-cases", "6"]


class TestVerifyCommand:
    def test_passes(self, tmp_path, capsys):
        path = tmp_path / "v.json"
        code, out, _ = _run(capsys, *FAST_VERIFY, "--json", str(path))
        assert code == 0
        assert out.count("PASS") == 5
        assert json.loads(path.read_text())["passed"] is True
        assert json.loads(out.splitlines()[-1])["passed"] is True

    def test_suite_filter(self, capsys):
        code, out, _ = _run(capsys, *FAST_VERIFY, "--suite=forward")
        assert code == 0
        assert [s["name"] for s in json.loads(out.splitlines()[-1])["suites"]] == ["forward"]

    def test_beta_sign_flip(self, capsys, beta_sign_flip):
        code, out, _ = _run(capsys, *FAST_VERIFY)
        assert code == 1
        assert "FAIL  gradients" in out

    def test_off_by_one(self, capsys, prefix_off_by_one):
        assert _run(capsys, *FAST_VERIFY)[0] == 1

    def test_a_term_omission(self, capsys, a_term_omission):
        assert _run(capsys, *FAST_VERIFY)[0] == 1
