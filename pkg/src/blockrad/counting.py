"""Lattice-shell counts, volumes of hyperbolic-cross regions and the weight ordering tau.

Shells are counted in exact integer arithmetic: a point k of Z^m lies in shell
L when ``2^{L(d-m)} <= prod max(1, |k_i|)^{g_i - 1} < 2^{(L+1)(d-m)}``, which is
the same as ``2^L <= prod max(1,|k_i|)^{alpha_i} < 2^{L+1}`` without any
rounding.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from blockrad._parallel import ordered_map
from blockrad.errors import (
    InputError, InsufficientDataError, NumericalError, ParameterError, ResourceError,
)
from blockrad.geometry import BlockDecomposition, DyadicCube, cube_weight_exact

# multiplicity of |k_i| = 1 and of each |k_i| = v >= 2 in the three lattices
MODES = {
    "tilde": (1, 1),   # k_i >= 1
    "n0": (2, 1),      # k_i >= 0, max(1, k_i) merges 0 and 1
    "z": (3, 2),       # k_i in Z
}
MODE_ALIASES = {"tilde": "tilde", "w-tilde": "tilde", "n0": "n0", "n0^m": "n0", "z": "z", "z^m": "z"}

DEFAULT_BUDGET = 50_000_000
_MAX_BITS = 62


def _mode(mode: str) -> str:
    key = MODE_ALIASES.get(str(mode).lower())
    if key is None:
        raise InputError(f"unknown lattice mode {mode!r}; use one of {sorted(MODES)}")
    return key


def _floor_root(n: np.ndarray, e: int) -> np.ndarray:
    """Largest integer v >= 0 with v^e <= n (n < 0 gives 0)."""
    n = np.asarray(n, dtype=np.int64)
    if e == 1:
        return np.maximum(n, 0)
    pos = np.maximum(n, 0)
    v = np.floor(np.power(pos.astype(np.float64), 1.0 / e)).astype(np.int64)
    for _ in range(4):
        v = np.where(np.power(v, e) > pos, v - 1, v)
    for _ in range(4):
        v = np.where(np.power(v + 1, e) <= pos, v + 1, v)
    return np.where(n < 0, 0, v)


def _ceil_root(n: np.ndarray, e: int) -> np.ndarray:
    """Smallest integer v >= 1 with v^e >= n, for n >= 1."""
    return _floor_root(np.asarray(n, dtype=np.int64) - 1, e) + 1


def _prefix(exponents, mults, B: int, budget: int):
    """All prefix tuples v (v_i >= 1) with prod v_i^{e_i} <= B - 1.

    Returns the products and the lattice multiplicities, or raises
    :class:`ResourceError` once the enumeration would exceed ``budget``.
    """
    P = np.ones(1, dtype=np.int64)
    W = np.ones(1, dtype=np.int64)
    for e, (c1, c2) in zip(exponents, mults):
        vmax = _floor_root((B - 1) // P, e)
        total = int(vmax.sum())
        if total > budget:
            raise ResourceError(f"enumeration needs {total} prefix points, budget is {budget}")
        starts = np.repeat(np.cumsum(vmax) - vmax, vmax)
        v = np.arange(total, dtype=np.int64) - starts + 1
        P = np.repeat(P, vmax) * np.power(v, e)
        W = np.repeat(W, vmax) * np.where(v == 1, c1, c2)
    return P, W


def _last_axis_count(P, W, e, c1, c2, A: int, B: int) -> int:
    lo = _ceil_root((A + P - 1) // P, e)
    hi = _floor_root((B - 1) // P, e)
    one = ((lo <= 1) & (hi >= 1)).astype(np.int64) * c1
    rest = np.maximum(0, hi - np.maximum(lo, 2) + 1) * c2
    return int(np.sum(W * (one + rest)))


def _count_between(dec: BlockDecomposition, A: int, B: int, mode: str, budget: int,
                   threads: int | None = None) -> int:
    """Count lattice points with ``A <= prod max(1,|k_i|)^{g_i-1} < B``."""
    c = MODES[mode]
    e = [g - 1 for g in dec.gamma]
    if B.bit_length() + max(e) > _MAX_BITS:
        raise ResourceError("shell bounds exceed 62-bit integer range")
    # the axis with the smallest exponent has the longest range; keep it last
    prefix_e = e[1:][::-1]
    P, W = _prefix(prefix_e, [c] * len(prefix_e), B, budget)
    chunks = max(1, min(64, len(P) // 200_000))
    parts = np.array_split(np.arange(len(P)), chunks)
    counts = ordered_map(lambda ix: _last_axis_count(P[ix], W[ix], e[0], c[0], c[1], A, B),
                         parts, threads)
    return int(sum(counts))


def shell_count(L: int, dec: BlockDecomposition, mode: str = "tilde", *,
                budget: int = DEFAULT_BUDGET, threads: int | None = None) -> int:
    """Exact number of lattice points in dyadic shell ``L``.

    Parameters
    ----------
    L : int
        Shell level, ``L >= 0``.
    dec : BlockDecomposition
    mode : {"tilde", "n0", "z"}
        ``"tilde"`` counts ``k`` with all ``k_i >= 1``; ``"n0"`` uses
        ``k in N_0^m`` and ``"z"`` the full lattice ``Z^m``.
    budget : int
        Cap on the number of enumerated prefix points.

    Raises
    ------
    ResourceError
        When the enumeration exceeds ``budget``; the message names the levels
        that fit.
    """
    if int(L) != L or L < 0:
        raise InputError(f"shell level must be a nonnegative integer, got {L}")
    L = int(L)
    mode = _mode(mode)
    D = dec.d - dec.m
    try:
        return _count_between(dec, 2 ** (L * D), 2 ** ((L + 1) * D), mode, budget, threads)
    except ResourceError as exc:
        top = L - 1
        while top >= 0 and not _level_fits(top, dec, mode, budget):
            top -= 1
        hint = f"feasible levels: 0..{top}" if top >= 0 else "no level fits"
        raise ResourceError(f"{exc}; {hint}") from None


def _level_fits(L: int, dec: BlockDecomposition, mode: str, budget: int) -> bool:
    B = 2 ** ((L + 1) * (dec.d - dec.m))
    if B.bit_length() + max(dec.gamma) - 1 > _MAX_BITS:
        return False
    try:
        _prefix([g - 1 for g in dec.gamma[1:]][::-1], [MODES[mode]] * (dec.m - 1), B, budget)
    except ResourceError:
        return False
    return True


@dataclass
class ShellCensus:
    """Per-level shell counts for one block decomposition and lattice mode."""

    dec: BlockDecomposition
    levels: list[int]
    counts: list[int]
    mode: str = "tilde"

    def __post_init__(self):
        self.mode = _mode(self.mode)
        if len(self.levels) != len(self.counts):
            raise InputError("levels and counts differ in length")
        if any(c < 0 for c in self.counts):
            raise InputError("shell counts must be nonnegative")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["L", "count", "mode", "gamma"])
        g = " ".join(map(str, self.dec.input_gamma))
        for L, c in zip(self.levels, self.counts):
            w.writerow([L, c, self.mode, g])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ShellCensus":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise InputError("empty census CSV")
        dec = BlockDecomposition([int(v) for v in rows[0]["gamma"].split()])
        return cls(dec, [int(r["L"]) for r in rows], [int(r["count"]) for r in rows], rows[0]["mode"])


def census(dec: BlockDecomposition, levels: Sequence[int], mode: str = "tilde", *,
           budget: int = DEFAULT_BUDGET, threads: int | None = None) -> ShellCensus:
    levels = [int(L) for L in levels]
    counts = [shell_count(L, dec, mode, budget=budget, threads=threads) for L in levels]
    return ShellCensus(dec, levels, counts, mode)


def orbit_count(j: int, k_tilde: Sequence[int], dec: BlockDecomposition) -> int:
    """Number of grid points on the SO(gamma)-orbit through the point indexed by ``k_tilde``.

    Equals ``prod_{k_i != 0} k_i^{g_i - 1}``; the level ``j`` does not enter.
    """
    if j < 0:
        raise InputError(f"level must be >= 0, got {j}")
    if len(k_tilde) != dec.m:
        raise InputError(f"index has length {len(k_tilde)}, expected m={dec.m}")
    if any(int(k) < 0 for k in k_tilde):
        raise InputError("orbit indices must be nonnegative")
    return math.prod(int(k) ** (g - 1) for k, g in zip(k_tilde, dec.gamma) if int(k) != 0)


# ---------------------------------------------------------------------------
# volumes


def f_ell(ell: int, r: float) -> float:
    """``r (ln r)^{ell-1} / (ell-1)!``."""
    if ell < 1 or int(ell) != ell:
        raise ParameterError(f"ell must be a positive integer, got {ell}")
    if not r > 1:
        raise ParameterError(f"f_ell needs r > 1, got {r}")
    return r * math.log(r) ** (ell - 1) / math.factorial(int(ell) - 1)


def hyperbolic_volume_bounds(ell: int, r: float) -> tuple[float, float]:
    """Two-sided bounds on ``vol{x in [1,inf)^ell : prod x_i <= r}``, valid for ``r >= 2^ell``."""
    upper = f_ell(ell, r)
    lower = f_ell(ell, r) - f_ell(ell - 1, r) if ell >= 2 else r - 1.0
    return lower, upper


def _simpson(f, a: float, b: float, rtol: float, max_depth: int = 40) -> float:
    """Adaptive Simpson quadrature with a relative tolerance."""
    if b <= a:
        return 0.0
    n0 = 16
    xs = np.linspace(a, b, 2 * n0 + 1)
    fs = [f(x) for x in xs]
    panels = [(xs[2 * i], xs[2 * i + 2], fs[2 * i], fs[2 * i + 1], fs[2 * i + 2]) for i in range(n0)]
    coarse = sum((p[1] - p[0]) / 6 * (p[2] + 4 * p[3] + p[4]) for p in panels)
    tol = rtol * max(abs(coarse), 1e-300)
    total, worst = 0.0, 0.0
    stack = [(p, tol / n0, 0) for p in panels]
    while stack:
        (x0, x1, f0, fm, f1), eps, depth = stack.pop()
        h = x1 - x0
        whole = h / 6 * (f0 + 4 * fm + f1)
        xl, xr = x0 + h / 4, x0 + 3 * h / 4
        fl, fr = f(xl), f(xr)
        xm = 0.5 * (x0 + x1)
        left = h / 12 * (f0 + 4 * fl + fm)
        right = h / 12 * (fm + 4 * fr + f1)
        err = abs(left + right - whole)
        if err <= 15 * eps or depth >= max_depth:
            if err > 15 * eps:
                worst = max(worst, err / 15)
            total += left + right + (left + right - whole) / 15
        else:
            stack.append(((x0, xm, f0, fl, fm), eps / 2, depth + 1))
            stack.append(((xm, x1, fm, fr, f1), eps / 2, depth + 1))
    if worst > 0 and worst > rtol * abs(total):
        raise NumericalError(f"adaptive Simpson stalled; achieved relative error {worst / abs(total):.2e}")
    return total


def _alphas(dec_or_alphas) -> list[float]:
    if isinstance(dec_or_alphas, BlockDecomposition):
        a = [float(x) for x in dec_or_alphas.alphas]
    else:
        a = sorted(float(x) for x in dec_or_alphas)
    if not a or a[0] <= 0:
        raise ParameterError("alphas must be positive")
    return a


def volume_VmR(R: float, dec_or_alphas, rtol: float = 1e-8) -> float:
    """``vol_m{x in [1,inf)^m : prod x_i^{alpha_i} <= R}`` by the one-dimensional recursion.

    Each level integrates the previous volume over the new coordinate,
    written in ``x = e^u`` so the integrand is smooth, with adaptive Simpson.
    """
    if not R > 1:
        raise ParameterError(f"R must exceed 1, got {R}")
    a = _alphas(dec_or_alphas)

    def vol(level: int, lnR: float) -> float:
        if lnR <= 0:
            return 0.0
        if level == 1:
            return math.expm1(lnR / a[0])
        al = a[level - 1]
        return _simpson(lambda u: vol(level - 1, lnR - al * u) * math.exp(u), 0.0, lnR / al, rtol)

    return float(vol(len(a), math.log(R)))


def volume_equal_alpha(R: float, m: int, alpha: float) -> float:
    """Closed form of the volume when all ``alpha_i`` coincide."""
    r = R ** (1.0 / alpha)
    lr = math.log(r)
    return r * sum((-1) ** (m - 1 - i) * lr ** i / math.factorial(i) for i in range(m)) + (-1) ** m


@dataclass(frozen=True)
class VolumeBounds:
    lower: float
    upper: float
    constant: float
    lower_threshold: float
    upper_threshold: float


def c_ell(ell: int, alpha1: float) -> float:
    return alpha1 ** (1 - ell) * math.log(2) ** (ell - 1) / math.factorial(ell - 1)


def volume_bounds(R: float, dec_or_alphas) -> VolumeBounds:
    """Explicit sandwich ``C/2 * R^{1/a1} (log2 R)^{n-1} <= vol <= C * R^{1/a1} (log2 R)^{n-1}``.

    ``C = c_n prod_{l > n} a1 / (a_l - a1)``.  The upper bound holds for every
    ``R > 1``.  The lower bound carries the threshold ``lower_threshold``:
    ``max(2^{a1}, e^{2 a1 (n-1)})`` when all alphas agree, and otherwise the
    smallest ``R`` beyond which the halved constant is attained by the
    leading-order expansion (see :func:`lower_bound_threshold`).
    """
    a = _alphas(dec_or_alphas)
    a1 = a[0]
    n = sum(1 for x in a if x == a1)
    C = c_ell(n, a1) * math.prod(a1 / (al - a1) for al in a[n:])
    lead = R ** (1.0 / a1) * math.log2(R) ** (n - 1)
    return VolumeBounds(0.5 * C * lead, C * lead, C, lower_bound_threshold(a), 1.0)


def lower_bound_threshold(dec_or_alphas) -> float:
    """Smallest ``R = 2^{j/2}`` from which the halved-constant lower bound holds up to ``2^20``."""
    return _threshold(tuple(_alphas(dec_or_alphas)))


@functools.lru_cache(maxsize=128)
def _threshold(a: tuple[float, ...]) -> float:
    a1 = a[0]
    n = sum(1 for x in a if x == a1)
    base = max(2 ** a1, math.exp(2 * a1 * (n - 1)))
    if n == len(a):
        return base
    C = volume_bounds_constant(a)
    good = None
    for j in range(1, 41):
        R = 2.0 ** (j / 2)
        lead = R ** (1.0 / a1) * math.log2(R) ** (n - 1)
        ok = R >= base and volume_VmR(R, a, rtol=1e-6) >= 0.5 * C * lead
        if ok and good is None:
            good = R
        elif not ok:
            good = None
    return good if good is not None else math.inf


def volume_bounds_constant(dec_or_alphas) -> float:
    a = _alphas(dec_or_alphas)
    a1 = a[0]
    n = sum(1 for x in a if x == a1)
    return c_ell(n, a1) * math.prod(a1 / (al - a1) for al in a[n:])


def volume_monte_carlo(R: float, dec_or_alphas, samples: int = 1_000_000, seed: int = 0):
    """Importance-sampled hit-or-miss estimate of the volume and its standard error.

    Coordinates ``x_j`` (``j >= 2``) are drawn from truncated power laws
    ``x^{-a_j/a_1}`` on ``[1, R^{1/a_j}]``, roughly following the region's
    marginals.  Given those, ``x_1`` is uniform on ``[1, e * A]`` where ``A``
    is where the boundary crosses the ``x_1`` line, so about a fraction
    ``1/e`` of samples hit.  Hits score the inverse proposal density.
    """
    if not R > 1:
        raise ParameterError(f"R must exceed 1, got {R}")
    a = np.asarray(_alphas(dec_or_alphas))
    rng = np.random.default_rng(seed)
    lnR = math.log(R)
    lnX = lnR / a
    U = rng.random((samples, len(a)))
    logx = np.empty_like(U)
    logw = np.zeros(samples)
    lnA = np.full(samples, lnX[0])
    for j in range(1, len(a)):
        b = a[j] / a[0]
        if abs(b - 1) < 1e-12:
            logx[:, j] = U[:, j] * lnX[j]
            logw += logx[:, j] + math.log(lnX[j])          # 1/q = x ln X
        else:
            tail = -math.expm1((1 - b) * lnX[j])          # 1 - X^{1-b}
            logx[:, j] = np.log1p(-U[:, j] * tail) / (1 - b)
            logw += b * logx[:, j] + math.log(tail / (b - 1))
        lnA -= b * logx[:, j]
    top = np.maximum(lnA, 0.0) + 1.0
    span = np.expm1(top)
    logx[:, 0] = np.log1p(U[:, 0] * span)
    logw += np.log(span)
    hit = logx @ a <= lnR
    vals = np.where(hit, np.exp(logw), 0.0)
    est = float(vals.mean())
    return est, float(vals.std(ddof=1) / math.sqrt(samples))


# ---------------------------------------------------------------------------
# tau ordering


@dataclass
class OrderedWeightSequence:
    """Cube weights ``w(Q_{0,k})`` in non-decreasing order.

    ``numerators[l] / denominator`` is the exact value ``v(l)`` and
    ``index_map[l]`` the lattice point of rank ``l``.
    """

    dec: BlockDecomposition
    length: int
    values: np.ndarray
    index_map: np.ndarray
    numerators: np.ndarray = field(repr=False)
    denominator: int = 1

    def exact(self, ell: int) -> Fraction:
        return Fraction(int(self.numerators[ell]), self.denominator)

    def cube(self, ell: int) -> DyadicCube:
        return DyadicCube(0, tuple(int(v) for v in self.index_map[ell]))


def _tau_candidates(dec: BlockDecomposition, X: int):
    """Nonnegative j-tuples with ``prod a_{g_i}(j_i) <= X``, ``a_g(j) = (j+1)^g - j^g``."""
    P = np.ones(1, dtype=np.int64)
    J = np.zeros((1, 0), dtype=np.int64)
    for g in dec.gamma:
        # a_g is increasing; largest j with a_g(j) <= X // P via a vectorized search
        tops = X // P
        jmax_all = int(_floor_root(np.array([X]), g - 1)[0]) + 2
        js = np.arange(jmax_all + 1, dtype=np.int64)
        a = np.power(js + 1, g) - np.power(js, g)
        counts = np.searchsorted(a, tops, side="right")
        total = int(counts.sum())
        starts = np.repeat(np.cumsum(counts) - counts, counts)
        j = np.arange(total, dtype=np.int64) - starts
        P = np.repeat(P, counts) * a[j]
        J = np.concatenate([np.repeat(J, counts, axis=0), j[:, None]], axis=1)
    return P, J


def enumerate_tau(dec: BlockDecomposition, length: int) -> OrderedWeightSequence:
    """First ``length`` values of the ordered cube-weight sequence at level 0.

    Ties are broken lexicographically on the lattice point.
    """
    if length < 1:
        raise InputError(f"length must be >= 1, got {length}")
    m = dec.m
    X = 1
    while True:
        if X.bit_length() + max(dec.gamma) > _MAX_BITS:
            raise ResourceError("tau enumeration exceeds 62-bit integer range")
        P, J = _tau_candidates(dec, X)
        if len(P) * 2 ** m >= length:
            break
        X *= 2
    # each j >= 0 stands for the two lattice values n = j and n = -j - 1
    signs = np.array(np.meshgrid(*([[0, 1]] * m), indexing="ij")).reshape(m, -1).T
    K = np.repeat(J, len(signs), axis=0)
    S = np.tile(signs, (len(J), 1))
    K = np.where(S == 1, -K - 1, K)
    W = np.repeat(P, len(signs))
    order = np.lexsort(tuple(K[:, i] for i in range(m - 1, -1, -1)) + (W,))[:length]
    denom = math.prod(dec.gamma)
    nums = W[order]
    return OrderedWeightSequence(dec, length, nums / denom, K[order], nums, denom)


# ---------------------------------------------------------------------------
# fits


@dataclass(frozen=True)
class ShellFit:
    """Least-squares exponent fits of ``log2(count)`` against ``L``.

    ``slope`` is the plain fit; ``corrected_slope`` comes from the fit with
    the extra regressor ``(n-1) log2 L`` and ``log_gain`` is the fractional
    reduction of the residual sum of squares it buys.
    """

    slope: float
    log_gain: float
    corrected_slope: float
    theoretical: float
    log_coefficient: float
    cumulative: bool = False

    def __iter__(self):
        yield self.slope
        yield self.log_gain

    def to_json(self) -> str:
        return json.dumps({"slope": self.slope, "theoretical": self.theoretical,
                           "log_gain": self.log_gain, "corrected_slope": self.corrected_slope,
                           "log_coefficient": self.log_coefficient, "cumulative": self.cumulative})


def _rss(Xm, y):
    coef, *_ = np.linalg.lstsq(Xm, y, rcond=None)
    r = y - Xm @ coef
    return coef, float(r @ r)


def fit_shell_exponent(census: ShellCensus, cumulative: bool = False) -> ShellFit:
    """Exponent fit of a shell census, per-shell or on cumulative counts."""
    L = np.asarray(census.levels, dtype=float)
    c = np.asarray(census.counts, dtype=float)
    if cumulative:
        order = np.argsort(L)
        L, c = L[order], np.cumsum(c[order])
    use = (c > 0) & (L >= 1)
    if use.sum() < 4:
        raise InsufficientDataError(f"need >= 4 levels with nonzero counts, got {int(use.sum())}")
    L, y = L[use], np.log2(c[use])
    n = census.dec.n
    X1 = np.column_stack([np.ones_like(L), L])
    coef1, rss1 = _rss(X1, y)
    if n > 1:
        X2 = np.column_stack([X1, (n - 1) * np.log2(L)])
        coef2, rss2 = _rss(X2, y)
        gain = 0.0 if rss1 <= 1e-24 else max(0.0, 1.0 - rss2 / rss1)
        corrected, logc = float(coef2[1]), float(coef2[2])
    else:
        gain, corrected, logc = 0.0, float(coef1[1]), 0.0
    theo = float(1 / census.dec.alphas[0])
    return ShellFit(float(coef1[1]), gain, corrected, theo, logc, cumulative)
