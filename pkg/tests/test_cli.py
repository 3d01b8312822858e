import json

import numpy as np
import pytest

from blockrad.cli import main, parse_beta_range, parse_levels, parse_number, UsageError

SPEC = {"s": 3, "theta": 1.0, "r": 2, "gamma": [2, 2],
        "potential": {"kind": "annulus", "rho": [1, 1], "delta": 1.0}}


@pytest.fixture
def spec_file(tmp_path):
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(SPEC))
    return p


def error_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


class TestParsing:
    def test_numbers(self):
        assert parse_number("2^4") == 16 and parse_number("3.5") == 3.5

    def test_levels(self):
        assert parse_levels("3..11") == list(range(3, 12))
        with pytest.raises(UsageError):
            parse_levels("5..2")

    def test_beta(self):
        b = parse_beta_range("2^4..2^12:geometric:9")
        assert b == pytest.approx(2.0 ** np.arange(4, 13), rel=1e-14)
        with pytest.raises(UsageError):
            parse_beta_range("1..2:linear:4")


class TestCommands:
    def test_shells_rows(self, tmp_path):
        assert main(["shells", "--gamma", "2,2", "--levels", "3..11", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "shells.csv").read_text().splitlines()
        assert len(lines) == 10
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["command"] == "shells" and "shells.csv" in meta["outputs"]
        assert {"seed", "wall_time_s", "versions", "parameters"} <= set(meta)

    def test_scan_rows(self, tmp_path, spec_file):
        rc = main(["scan", "--spec", str(spec_file), "--beta", "2^4..2^12:geometric:9", "--out", str(tmp_path)])
        assert rc == 0
        lines = (tmp_path / "scan.csv").read_text().splitlines()
        assert lines[0] == "beta,bs_count,maxmin_count,grid_N,unitarity_residual"
        assert len(lines) == 10

    def test_fit_scan_and_census(self, tmp_path, spec_file):
        main(["scan", "--spec", str(spec_file), "--out", str(tmp_path / "a")])
        assert main(["fit", "--table", str(tmp_path / "a" / "scan.csv"), "--spec", str(spec_file),
                     "--out", str(tmp_path / "b")]) == 0
        fits = json.loads((tmp_path / "b" / "fit.json").read_text())
        assert 0.52 <= fits["bs_count"]["exponent"] <= 1.15
        main(["shells", "--gamma", "2,3", "--levels", "3..11", "--out", str(tmp_path / "c")])
        assert main(["fit", "--table", str(tmp_path / "c" / "shells.csv"), "--out", str(tmp_path / "d")]) == 0
        assert json.loads((tmp_path / "d" / "fit.json").read_text())["slope"] == pytest.approx(3, rel=0.05)

    @pytest.mark.parametrize("argv,name", [
        (["trace-check", "--gamma", "2,3"], "trace.csv"),
        (["volume", "--gamma", "2,3", "--levels", "1..4", "--samples", "20000"], "volume.csv"),
        (["enumerate", "--gamma", "2,2", "--length", "50"], "tau.csv"),
        (["entropy-bounds", "--gamma", "2,2", "--k-max", "6", "--grid-n", "16"], "rates.csv"),
    ])
    def test_other_commands(self, tmp_path, argv, name):
        assert main(argv + ["--out", str(tmp_path)]) == 0
        assert (tmp_path / name).exists() and (tmp_path / "meta.json").exists()

    def test_entropy_spec_file(self, tmp_path):
        p = tmp_path / "op.json"
        p.write_text(json.dumps({"gamma": [2, 2], "p1": 1, "p2": 2, "N": 16}))
        assert main(["entropy-bounds", "--spec", str(p), "--k-max", "4", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "rates.csv").read_text().startswith("k,lower_bound,upper_bound,kuhn_rate,schutt_rate")

    def test_spectrum(self, tmp_path, spec_file):
        assert main(["spectrum", "--spec", str(spec_file), "--count", "3", "--grid-n", "32",
                     "--out", str(tmp_path)]) == 0
        assert len((tmp_path / "spectrum.csv").read_text().splitlines()) == 4


class TestErrors:
    def test_unknown_flag(self, capsys):
        assert main(["shells", "--gamma", "2,2", "--bogus"]) == 2
        assert error_json(capsys)["exit_code"] == 2

    def test_missing_command(self, capsys):
        assert main([]) == 2

    def test_precondition(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(dict(SPEC, s=1)))
        assert main(["scan", "--spec", str(p), "--out", str(tmp_path)]) == 3
        assert error_json(capsys)["error"] == "ParameterError"

    def test_bad_gamma(self, tmp_path, capsys):
        assert main(["shells", "--gamma", "1,2", "--out", str(tmp_path)]) == 3

    def test_numerical(self, tmp_path, spec_file, capsys):
        # a 16-node grid cannot resolve any Max-Min level
        assert main(["scan", "--spec", str(spec_file), "--grid-n", "16", "--out", str(tmp_path)]) == 4
        assert error_json(capsys)["error"] == "ResolutionError"

    def test_bad_level(self, tmp_path, spec_file):
        assert main(["scan", "--spec", str(spec_file), "--level", "x", "--out", str(tmp_path)]) == 2


class TestDeterminism:
    def test_byte_identical(self, tmp_path, spec_file, monkeypatch):
        runs = []
        for i, threads in enumerate(("1", "4")):
            monkeypatch.setenv("BLOCKRAD_THREADS", threads)
            out = tmp_path / str(i)
            main(["scan", "--spec", str(spec_file), "--grid-n", "128", "--level", "best", "--out", str(out)])
            main(["volume", "--gamma", "2,3", "--levels", "1..5", "--samples", "50000", "--seed", "7",
                  "--out", str(out)])
            main(["shells", "--gamma", "2,2", "--levels", "0..11", "--out", str(out)])
            runs.append({n: (out / n).read_bytes() for n in ("scan.csv", "volume.csv", "shells.csv")})
        assert runs[0] == runs[1]

    def test_seed_changes_monte_carlo(self, tmp_path):
        for s in ("1", "2"):
            main(["volume", "--gamma", "2,3", "--levels", "2..2", "--samples", "5000", "--seed", s,
                  "--out", str(tmp_path / s)])
        assert (tmp_path / "1" / "volume.csv").read_bytes() != (tmp_path / "2" / "volume.csv").read_bytes()
