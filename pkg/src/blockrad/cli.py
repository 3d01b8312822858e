"""Command-line front end.

Every command writes its tables into ``--out`` together with ``meta.json``.
Exit codes: 0 success, 1 failed acceptance criteria, 2 usage error,
3 precondition failure, 4 numerical failure.  Errors are reported as one
JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import platform
import re
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import scipy

from blockrad import __version__
from blockrad.counting import (
    ShellCensus, census, enumerate_tau, fit_shell_exponent, volume_bounds, volume_monte_carlo, volume_VmR,
)
from blockrad.errors import BlockRadError, InputError
from blockrad.geometry import BlockDecomposition, lp_norm_reduced, trace
from blockrad.seqspace import DiagonalOperatorSpec, rate_table, rate_table_csv
from blockrad.spectral import (
    ScanRow, ScanTable, SchrodingerSpec, assemble_bs_operator, build_grid, fit_growth, geometric_betas, scan_beta,
)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_NUM = r"[-+0-9.eE]+(?:\^[-+0-9.]+)?"


def parse_number(text: str) -> float:
    """``"2^4"`` or a plain float."""
    text = text.strip()
    if "^" in text:
        base, exp = text.split("^", 1)
        return float(base) ** float(exp)
    return float(text)


def parse_levels(text: str) -> list[int]:
    m = re.fullmatch(r"\s*(\d+)\s*\.\.\s*(\d+)\s*", text)
    if not m or int(m.group(1)) > int(m.group(2)):
        raise UsageError(f"levels must look like a..b with a <= b, got {text!r}")
    return list(range(int(m.group(1)), int(m.group(2)) + 1))


def parse_beta_range(text: str) -> np.ndarray:
    m = re.fullmatch(rf"\s*({_NUM})\s*\.\.\s*({_NUM})\s*:\s*geometric\s*:\s*(\d+)\s*", text)
    if not m:
        raise UsageError(f"beta range must look like lo..hi:geometric:n, got {text!r}")
    try:
        return geometric_betas(parse_number(m.group(1)), parse_number(m.group(2)), int(m.group(3)))
    except (ValueError, InputError) as exc:
        raise UsageError(str(exc)) from None


def _gamma(args) -> BlockDecomposition:
    if not args.gamma:
        raise UsageError("--gamma is required")
    return BlockDecomposition.parse(args.gamma)


def _read_spec(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read spec file: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"spec is not valid JSON: {exc}") from None


def _write(out: Path, name: str, text: str, outputs: list[str]) -> None:
    (out / name).write_text(text)
    outputs.append(name)


# ---------------------------------------------------------------------------
# commands


def cmd_trace_check(args, out, outputs):
    dec = _gamma(args)
    g = trace(lambda x: np.exp(-np.sum(x ** 2, -1)), dec)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p", "reduced", "exact", "rel_error"])
    for p in (1, 2, 3):
        val = lp_norm_reduced(g, p) ** p
        exact = (math.pi / p) ** (dec.d / 2)
        w.writerow([p, repr(val), repr(exact), f"{abs(val / exact - 1):.3e}"])
    _write(out, "trace.csv", buf.getvalue(), outputs)


def cmd_shells(args, out, outputs):
    dec = _gamma(args)
    levels = parse_levels(args.levels or "0..8")
    c = census(dec, levels, args.mode)
    _write(out, "shells.csv", c.to_csv(), outputs)
    try:
        _write(out, "shells_fit.json", fit_shell_exponent(c).to_json() + "\n", outputs)
    except BlockRadError:
        pass


def cmd_volume(args, out, outputs):
    dec = _gamma(args)
    levels = parse_levels(args.levels or "1..16")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["R", "volume", "lower_bound", "upper_bound", "lower_threshold", "mc_estimate", "mc_std_error"])
    for j in levels:
        if j < 1:
            raise InputError("volume levels must be >= 1 (R = 2^j > 1)")
        R = 2.0 ** j
        b = volume_bounds(R, dec)
        est, se = volume_monte_carlo(R, dec, args.samples, seed=args.seed)
        w.writerow([repr(R), repr(float(volume_VmR(R, dec))), repr(b.lower), repr(b.upper), repr(b.lower_threshold),
                    repr(est), repr(se)])
    _write(out, "volume.csv", buf.getvalue(), outputs)


def cmd_enumerate(args, out, outputs):
    dec = _gamma(args)
    seq = enumerate_tau(dec, args.length)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ell", "weight"] + [f"k{i + 1}" for i in range(dec.m)])
    for ell in range(seq.length):
        w.writerow([ell, repr(float(seq.values[ell]))] + [int(v) for v in seq.index_map[ell]])
    _write(out, "tau.csv", buf.getvalue(), outputs)


def _operator_spec(args) -> DiagonalOperatorSpec:
    if args.spec:
        data = _read_spec(args.spec)
        if args.grid_n:
            data["N"] = args.grid_n
        return DiagonalOperatorSpec.from_json(json.dumps(data))
    dec = _gamma(args)
    return DiagonalOperatorSpec.block_radial(dec, args.p1, args.p2, args.grid_n or 64)


def cmd_entropy_bounds(args, out, outputs):
    spec = _operator_spec(args)
    rows = rate_table(spec, range(1, args.k_max + 1))
    _write(out, "rates.csv", rate_table_csv(rows), outputs)


def _schrodinger(args) -> SchrodingerSpec:
    if not args.spec:
        raise UsageError("--spec is required")
    return SchrodingerSpec.from_json(json.dumps(_read_spec(args.spec)))


def cmd_spectrum(args, out, outputs):
    spec = _schrodinger(args)
    N = args.grid_n or 64
    grid = build_grid(spec.dec, N, spec.default_T())
    mu = assemble_bs_operator(spec, grid).eigenvalues
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "mu", "critical_beta"])
    for i, v in enumerate(mu[: args.count], 1):
        w.writerow([i, repr(float(v)), repr(float(1 / v)) if v > 0 else "inf"])
    _write(out, "spectrum.csv", buf.getvalue(), outputs)


def cmd_scan(args, out, outputs):
    spec = _schrodinger(args)
    betas = parse_beta_range(args.beta or "2^4..2^12:geometric:9")
    level = _parse_level(args.level)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        table = scan_beta(spec, betas, N=args.grid_n or 64, level=level, check_N=args.check_n)
    for wmsg in caught:
        print(json.dumps({"warning": type(wmsg.message).__name__, "message": str(wmsg.message)}), file=sys.stderr)
    _write(out, "scan.csv", table.to_csv(), outputs)
    try:
        _write(out, "scan_fit.json", fit_growth(table).to_json() + "\n", outputs)
    except BlockRadError:
        pass


def _parse_level(text: str):
    if text in ("rule", "best"):
        return text
    if not re.fullmatch(r"\d+", text):
        raise UsageError(f"--level must be rule, best or a nonnegative integer, got {text!r}")
    return int(text)


def _read_scan(text: str, spec: SchrodingerSpec) -> ScanTable:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append(ScanRow(float(r["beta"]), int(r["bs_count"]), int(r["maxmin_count"]), int(r["grid_N"]),
                            float(r["unitarity_residual"])))
    return ScanTable(rows, spec.dec, spec.s, spec.r_lebesgue)


def cmd_fit(args, out, outputs):
    if not args.table:
        raise UsageError("--table is required")
    try:
        text = Path(args.table).read_text()
    except OSError as exc:
        raise InputError(f"cannot read table: {exc}") from None
    header = text.splitlines()[0] if text else ""
    if header.startswith("L,count"):
        fit = fit_shell_exponent(ShellCensus.from_csv(text), cumulative=args.cumulative)
        _write(out, "fit.json", fit.to_json() + "\n", outputs)
    elif header.startswith("beta,"):
        table = _read_scan(text, _schrodinger(args))
        fits = {"bs_count": json.loads(fit_growth(table).to_json())}
        try:
            fits["maxmin_count"] = json.loads(fit_growth(table, "maxmin_count").to_json())
        except BlockRadError as exc:
            fits["maxmin_count"] = {"error": str(exc)}
        _write(out, "fit.json", json.dumps(fits, sort_keys=True) + "\n", outputs)
    else:
        raise InputError("table must be a shell census or a beta scan CSV")


def cmd_acceptance(args, out, outputs):
    from blockrad.acceptance import run_all
    results = run_all()
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    _write(out, "acceptance.txt", "\n".join(lines) + "\n", outputs)
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "trace-check": (cmd_trace_check, "check the trace identity on a Gaussian"),
    "shells": (cmd_shells, "dyadic shell census"),
    "volume": (cmd_volume, "hyperbolic-cross volumes, bounds and Monte-Carlo checks"),
    "enumerate": (cmd_enumerate, "ordered cube-weight sequence"),
    "entropy-bounds": (cmd_entropy_bounds, "entropy-number bounds and predicted rates"),
    "spectrum": (cmd_spectrum, "Birman-Schwinger eigenvalues"),
    "scan": (cmd_scan, "bound-state counts over a coupling grid"),
    "fit": (cmd_fit, "growth fits for a census or scan table"),
    "acceptance": (cmd_acceptance, "run all acceptance criteria"),
}


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--gamma", help="block sizes, e.g. 2,3")
    common.add_argument("--levels", help="inclusive level range a..b")
    common.add_argument("--spec", help="JSON spec file")
    common.add_argument("--beta", help="coupling grid lo..hi:geometric:n (2^k allowed)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--grid-n", type=int, dest="grid_n", help="nodes per axis / truncation dimension")

    p = Parser(prog="blockrad", description="Block-radial counting, entropy and spectral experiments.")
    p.add_argument("--version", action="version", version=f"blockrad {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=Parser)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_text)
        if name == "shells":
            sp.add_argument("--mode", default="tilde", choices=["tilde", "n0", "z"])
        elif name == "volume":
            sp.add_argument("--samples", type=int, default=1_000_000)
        elif name == "enumerate":
            sp.add_argument("--length", type=int, default=1000)
        elif name == "entropy-bounds":
            sp.add_argument("--p1", type=float, default=1.0)
            sp.add_argument("--p2", type=float, default=2.0)
            sp.add_argument("--k-max", type=int, default=30, dest="k_max")
        elif name == "spectrum":
            sp.add_argument("--count", type=int, default=50)
        elif name == "scan":
            sp.add_argument("--level", default="rule", help="rule, best or an integer level")
            sp.add_argument("--check-n", type=int, dest="check_n", help="finer grid for the convergence check")
        elif name == "fit":
            sp.add_argument("--table", help="CSV produced by shells or scan")
            sp.add_argument("--cumulative", action="store_true")
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("a command is required")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        fn = COMMANDS[args.command][0]
        outputs: list[str] = []
        t0 = time.perf_counter()
        status = fn(args, out, outputs) or 0
    except UsageError as exc:
        return _fail("UsageError", str(exc), 2)
    except BlockRadError as exc:
        return _fail(type(exc).__name__, str(exc), exc.exit_code)
    except OSError as exc:
        return _fail("OSError", str(exc), 3)
    meta = {
        "command": args.command,
        "argv": argv,
        "parameters": {k: v for k, v in sorted(vars(args).items()) if k != "command"},
        "seed": args.seed,
        "outputs": outputs,
        "wall_time_s": round(time.perf_counter() - t0, 6),
        "versions": {"blockrad": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return status


if __name__ == "__main__":
    sys.exit(main())
