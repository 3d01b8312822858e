"""Acceptance criteria as executable checks.

Every check returns a :class:`Criterion` with a pass flag, the measured
quantities and the wall time; :func:`run_all` runs them in order.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import gammaln

from blockrad.counting import (
    census, enumerate_tau, fit_shell_exponent, lower_bound_threshold, volume_bounds, volume_monte_carlo,
    volume_VmR,
)
from blockrad.errors import BlockRadError
from blockrad.geometry import BlockDecomposition, block_radii, lp_norm_reduced, trace
from blockrad.seqspace import (
    DiagonalOperatorSpec, block_radial_rate, entropy_lower_bound, entropy_upper_bound, fit_sandwich_constant,
    rate_table, rate_table_csv,
)
from blockrad.spectral import (
    PotentialSpec, SchrodingerSpec, assemble_bs_operator, build_axis, build_grid, carl_check, fit_growth,
    geometric_betas, scan_beta,
)


@dataclass
class Criterion:
    number: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0
    error: str | None = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        info = ", ".join(f"{k}={_fmt(v)}" for k, v in self.details.items())
        if self.error:
            info = f"{info}, error={self.error}" if info else f"error={self.error}"
        return f"[{status}] {self.number}. {self.name} ({self.seconds:.1f}s): {info}"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + " ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _timed(number: int, name: str, fn: Callable[[dict], bool]) -> Criterion:
    details: dict = {}
    t0 = time.perf_counter()
    try:
        ok = bool(fn(details))
        err = None
    except BlockRadError as exc:
        ok, err = False, f"{type(exc).__name__}: {exc}"
    return Criterion(number, name, ok, details, time.perf_counter() - t0, err)


def trace_identity() -> Criterion:
    def ball(g, k):
        # int over R^g of (1 - |y|^2)_+^k
        return math.exp(0.5 * g * math.log(math.pi) + gammaln(k + 1) - gammaln(k + 1 + g / 2))

    def body(out):
        worst = 0.0
        t0 = time.perf_counter()
        for gam in ((2, 2), (2, 3), (3, 3)):
            dec = BlockDecomposition(gam)
            gauss = trace(lambda x: np.exp(-np.sum(x ** 2, -1)), dec)
            bump = trace(lambda x: np.prod(np.clip(1 - block_radii(x, dec) ** 2, 0, None) ** 4, -1),
                         dec, T=1.0, panels=2, order=12)
            for p in (1, 2):
                exact_g = (math.pi / p) ** (dec.d / 2)
                exact_b = math.prod(ball(g, 4 * p) for g in dec.gamma)
                worst = max(worst, abs(lp_norm_reduced(gauss, p) ** p / exact_g - 1),
                            abs(lp_norm_reduced(bump, p) ** p / exact_b - 1))
        out["max_rel_error"] = worst
        out["runtime_s"] = time.perf_counter() - t0
        return worst <= 1e-6 and out["runtime_s"] < 10
    return _timed(1, "trace identity", body)


def shell_rate() -> Criterion:
    def body(out):
        t0 = time.perf_counter()
        f23 = fit_shell_exponent(census(BlockDecomposition([2, 3]), range(3, 12)))
        f22 = fit_shell_exponent(census(BlockDecomposition([2, 2]), range(3, 12)))
        out.update(slope_23=f23.slope, slope_22=f22.slope, corrected_slope_22=f22.corrected_slope,
                   log_gain_22=f22.log_gain, runtime_s=time.perf_counter() - t0)
        return (abs(f23.slope / 3 - 1) <= 0.05 and abs(f22.corrected_slope / 2 - 1) <= 0.05
                and f22.log_gain >= 0.3 and out["runtime_s"] < 60)
    return _timed(2, "shell-count rate", body)


VOLUME_CASES = ((2, 2), (2, 3), (2, 2, 2), (2, 2, 3), (2, 3, 5))


def volume_sandwich(samples: int = 1_000_000, seed: int = 0) -> Criterion:
    def body(out):
        inside, checked, mc_worst = True, 0, 0.0
        for gam in VOLUME_CASES:
            dec = BlockDecomposition(gam)
            thr = lower_bound_threshold(dec)
            for j in range(1, 17):
                R = 2.0 ** j
                v = volume_VmR(R, dec)
                b = volume_bounds(R, dec)
                ok = v <= b.upper * (1 + 1e-7) and (R < thr or v >= b.lower)
                inside &= ok
                checked += 1
            for R in (4.0, 2.0 ** 8, 2.0 ** 16):
                est, _ = volume_monte_carlo(R, dec, samples, seed=seed)
                mc_worst = max(mc_worst, abs(est / volume_VmR(R, dec) - 1))
        out.update(points=checked, sandwich=inside, mc_max_rel_error=mc_worst)
        return inside and mc_worst < 0.02
    return _timed(3, "volume bounds", body)


def ordered_weights() -> Criterion:
    def body(out):
        seq = enumerate_tau(BlockDecomposition([2, 2]), 10 ** 5 + 1)
        ell = np.arange(16, 10 ** 5 + 1)
        x = ell / np.log2(ell)
        v = seq.values[ell]
        ratio = v / x
        slope = float(np.polyfit(np.log(x), np.log(v), 1)[0])
        band = float(ratio.max() / ratio.min())
        out.update(c=float(ratio.min()), C=float(ratio.max()), band=band, slope=slope)
        return band <= 4 and abs(slope - 1) <= 0.1
    return _timed(4, "ordered-weight asymptotics", body)


def entropy_sandwich() -> Criterion:
    def body(out):
        dec = BlockDecomposition([2, 2])
        spec = DiagonalOperatorSpec.block_radial(dec, 1, 2, 64)
        ks = range(1, 31)
        lo = [entropy_lower_bound(spec, k) for k in ks]
        hi = [entropy_upper_bound(spec, k) for k in ks]
        rates = [block_radial_rate(k, dec, 1, 2) for k in ks]
        c, frac = fit_sandwich_constant(rates, lo, hi)
        ordered = all(a <= b for a, b in zip(lo, hi))
        out.update(ordered=ordered, constant=c, fraction_inside=frac)
        return ordered and frac >= 0.8
    return _timed(5, "entropy sandwich", body)


def transform_quality() -> Criterion:
    # residuals already at round-off level cannot halve; those count as converged
    def body(out):
        ok = True
        for g in (2, 3):
            r64, r128 = build_axis(g, 64, 8.0).residual, build_axis(g, 128, 8.0).residual
            at_roundoff = r64 < 128 * 128 * np.finfo(float).eps
            out[f"residual_{g}_128"] = r128
            out[f"ratio_{g}"] = r64 / r128
            ok &= r128 <= 1e-3 and (r64 / r128 >= 2 or at_roundoff)
        return ok
    return _timed(6, "transform quality", body)


def acceptance_spec(beta: float = 1.0) -> SchrodingerSpec:
    return SchrodingerSpec(3.0, 1.0, beta, 2.0, BlockDecomposition([2, 2]), PotentialSpec("annulus", (1.0, 1.0), 1.0))


def spectral_scan() -> Criterion:
    def body(out):
        t0 = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            table = scan_beta(acceptance_spec(), geometric_betas(2 ** 4, 2 ** 12, 9), N=64, check_N=128)
        bs = table.column("bs_count")
        mm = table.column("maxmin_count")
        monotone = bool(np.all(np.diff(bs) >= 0))
        dominated = bool(np.all(mm <= bs))
        fit = fit_growth(table)
        out.update(bs_counts=[int(v) for v in bs], maxmin_counts=[int(v) for v in mm], monotone=monotone,
                   exponent=fit.exponent, dominated=dominated, resolution_warnings=len(caught))
        ok = monotone and dominated and 2 / 3 - 0.15 <= fit.exponent <= 1 + 0.15
        mm_fit = fit_growth(table, "maxmin_count")
        out["maxmin_exponent"] = mm_fit.exponent
        out["runtime_s"] = time.perf_counter() - t0
        return ok and mm_fit.exponent >= 2 / 3 - 0.15 and out["runtime_s"] < 1800
    return _timed(7, "spectral scan", body)


def carl_consistency() -> Criterion:
    def body(out):
        spec = acceptance_spec()
        op = assemble_bs_operator(spec, build_grid(spec.dec, 32, 8.0))
        rep = carl_check(op, kmax=20, truncation=32, strict=False)
        out.update(violations=len(rep.violations), min_margin=float(np.min(rep.margins)))
        return rep.passed
    return _timed(8, "Birman-Schwinger / Carl consistency", body)


def csv_artifacts(seed: int = 0) -> dict[str, str]:
    """CSV outputs of the main pipelines; identical inputs must give identical bytes."""
    out = {"shells.csv": census(BlockDecomposition([2, 2]), range(3, 12)).to_csv()}
    rows = ["R,estimate,std_error"]
    for R in (4.0, 2.0 ** 8):
        est, se = volume_monte_carlo(R, BlockDecomposition([2, 3]), 200_000, seed=seed)
        rows.append(f"{R!r},{est!r},{se!r}")
    out["volume.csv"] = "\n".join(rows) + "\n"
    spec = DiagonalOperatorSpec.block_radial(BlockDecomposition([2, 2]), 1, 2, 32)
    out["rates.csv"] = rate_table_csv(rate_table(spec, range(1, 11)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out["scan.csv"] = scan_beta(acceptance_spec(), geometric_betas(2 ** 4, 2 ** 12, 9), N=64).to_csv()
    return out


def determinism(seed: int = 0) -> Criterion:
    def body(out):
        a, b = csv_artifacts(seed), csv_artifacts(seed)
        same = [k for k in a if a[k] == b[k]]
        out.update(files=len(a), identical=len(same))
        return len(same) == len(a)
    return _timed(9, "determinism", body)


CRITERIA: tuple[Callable[[], Criterion], ...] = (
    trace_identity, shell_rate, volume_sandwich, ordered_weights, entropy_sandwich, transform_quality,
    spectral_scan, carl_consistency, determinism,
)


def run_all() -> list[Criterion]:
    return [fn() for fn in CRITERIA]
