"""Weighted Besov sequence spaces, diagonal operators and entropy-number bounds.

Logarithms in rate formulas are base 2.  Exponents may be ``math.inf`` with
the convention ``1/inf = 0``.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from blockrad.errors import (
    InputError, ParameterError, PreconditionWarning, ResourceError, UnsupportedRegimeError,
)
from blockrad.geometry import BlockDecomposition, DyadicCube, cube_weight, lp_ball_volume_log

DEFAULT_N_CAP = 64
DEFAULT_K_CAP = 30


def _inv(p: float) -> float:
    return 0.0 if math.isinf(p) else 1.0 / p


def _check_exponent(name: str, p: float) -> None:
    if not (p >= 1 or math.isinf(p)) or math.isnan(p):
        raise ParameterError(f"{name} must lie in [1, inf], got {p}")


@dataclass(frozen=True)
class EmbeddingParams:
    """Parameters of ``b^{sigma_1}_{p1,q1}(w) -> b^{sigma_2}_{p2,q2}(w)``."""

    s1: float
    s2: float
    p1: float
    p2: float
    q1: float
    q2: float
    dec: BlockDecomposition

    def __post_init__(self):
        for name in ("p1", "p2", "q1", "q2"):
            _check_exponent(name, getattr(self, name))
        if not self.p1 < self.p2:
            raise ParameterError(f"compactness needs p1 < p2, got p1={self.p1}, p2={self.p2}")
        if not self.delta > 0:
            raise ParameterError(f"compactness needs delta > 0, got {self.delta}")

    @property
    def sigma1(self) -> float:
        return self.s1 + self.dec.m / 2 - self.dec.m * _inv(self.p1)

    @property
    def sigma2(self) -> float:
        return self.s2 + self.dec.m / 2 - self.dec.m * _inv(self.p2)

    @property
    def delta(self) -> float:
        return self.s1 - self.s2 - self.dec.d * (_inv(self.p1) - _inv(self.p2))

    @property
    def sigma(self) -> float:
        return self.s2 - self.s1

    def predicted_rate(self, k: int) -> float:
        """``(k^{-g1} (log k)^{(n-1)(g1-1)})^{1/p1 - 1/p2}``."""
        return block_radial_rate(k, self.dec, self.p1, self.p2)


# ---------------------------------------------------------------------------
# sequence norms


@dataclass
class SequenceElement:
    """Finitely supported ``lambda_{nu, n}`` keyed by ``(nu, n)`` with ``n`` in Z^m."""

    entries: dict[tuple[int, tuple[int, ...]], complex] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, data: Mapping) -> "SequenceElement":
        out = {}
        for (nu, n), v in data.items():
            if int(nu) < 0:
                raise InputError(f"level nu must be >= 0, got {nu}")
            out[(int(nu), tuple(int(x) for x in n))] = v
        return cls(out)

    def scaled(self, c: complex) -> "SequenceElement":
        return SequenceElement({k: c * v for k, v in self.entries.items()})

    def __add__(self, other: "SequenceElement") -> "SequenceElement":
        out = dict(self.entries)
        for k, v in other.entries.items():
            out[k] = out.get(k, 0) + v
        return SequenceElement(out)


def bspq_norm(lam: SequenceElement, sigma: float, p: float, q: float,
              dec: BlockDecomposition) -> float:
    """``(sum_nu 2^{nu sigma q} (sum_n |lam|^p 2^{m nu} w(Q_{nu,n}))^{q/p})^{1/q}``."""
    _check_exponent("p", p)
    _check_exponent("q", q)
    m = dec.m
    levels: dict[int, list[tuple[float, float]]] = {}
    for (nu, n), v in lam.entries.items():
        if len(n) != m:
            raise InputError(f"index {n} has length {len(n)}, expected m={m}")
        levels.setdefault(nu, []).append((abs(v), 2.0 ** (m * nu) * cube_weight(DyadicCube(nu, n), dec)))
    inner = {}
    for nu, items in sorted(levels.items()):
        if math.isinf(p):
            inner[nu] = max((a for a, _ in items if a > 0), default=0.0)
        else:
            inner[nu] = sum(a ** p * w for a, w in items) ** (1.0 / p)
    if not inner:
        return 0.0
    terms = [2.0 ** (nu * sigma) * val for nu, val in inner.items()]
    if math.isinf(q):
        return float(max(terms))
    return float(sum(t ** q for t in terms) ** (1.0 / q))


# ---------------------------------------------------------------------------
# block-radial weights and rates


def _log_base(ell: float, n: int) -> float:
    """``ell * (log2 ell)^{1-n}`` for ``ell >= 2`` and 0 below."""
    if ell < 2:
        return 0.0
    return ell * math.log2(ell) ** (1 - n)


def tilde_weight(ell: int, dec: BlockDecomposition, p1: float, p2: float) -> float:
    """``max(1, ell (log2 ell)^{1-n})^{(g1-1)(1-p2/p1)}``, equal to 1 for ``ell`` in {0, 1}."""
    _check_exponent("p1", p1)
    _check_exponent("p2", p2)
    if not p1 < p2:
        raise ParameterError(f"tilde_weight needs p1 < p2, got p1={p1}, p2={p2}")
    if math.isinf(p2):
        raise ParameterError("tilde_weight degenerates for p2 = inf; use block_radial_sigma")
    if ell < 0:
        raise InputError(f"ell must be >= 0, got {ell}")
    base = max(1.0, _log_base(ell, dec.n))
    return base ** ((dec.gamma[0] - 1) * (1 - p2 / p1))


def block_radial_sigma(N: int, dec: BlockDecomposition, p1: float, p2: float,
                       power: float | None = None) -> np.ndarray:
    """Diagonal ``sigma_1..sigma_N`` built from the tilde weight.

    With ``power=None`` this is ``tilde_weight^{1/p2}``, i.e.
    ``max(1, l log^{1-n} l)^{(g1-1)(1/p2-1/p1)}``, which stays finite for
    ``p2 = inf``; otherwise ``tilde_weight^{power}``.  When ``n >= 2`` the raw
    values are not monotone for small ``l``, so the running minimum is taken.
    """
    if not p1 < p2:
        raise ParameterError(f"need p1 < p2, got p1={p1}, p2={p2}")
    g1 = dec.gamma[0]
    expo = (g1 - 1) * (_inv(p2) - _inv(p1)) if power is None else (g1 - 1) * (1 - p2 / p1) * power
    base = np.array([max(1.0, _log_base(k, dec.n)) for k in range(1, N + 1)])
    return np.minimum.accumulate(base ** expo)


def block_radial_rate(k: int, dec: BlockDecomposition, p1: float, p2: float) -> float:
    """``(k^{-g1} (log2 k)^{(n-1)(g1-1)})^{1/p1 - 1/p2}``."""
    g1, n = dec.gamma[0], dec.n
    r = _inv(p1) - _inv(p2)
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    lg = math.log2(k) if k > 1 else 0.0
    if (n - 1) * (g1 - 1) > 0 and lg == 0.0:
        return 0.0
    return (k ** (-g1) * lg ** ((n - 1) * (g1 - 1))) ** r


@dataclass
class DiagonalOperatorSpec:
    """``D_sigma : l_{p1} -> l_{p2}`` with non-increasing positive ``sigma``."""

    sigma: np.ndarray
    p1: float
    p2: float
    label: str = "explicit"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_exponent("p1", self.p1)
        _check_exponent("p2", self.p2)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.sigma.ndim != 1 or len(self.sigma) == 0:
            raise InputError("sigma must be a non-empty 1-d sequence")
        if np.any(self.sigma <= 0):
            raise InputError("sigma must be strictly positive")
        if np.any(np.diff(self.sigma) > 1e-15 * self.sigma[:-1]):
            raise InputError("sigma must be non-increasing")

    @property
    def N(self) -> int:
        return len(self.sigma)

    def truncated(self, N: int) -> "DiagonalOperatorSpec":
        if N > self.N:
            raise InputError(f"cannot truncate {self.N} values to {N}")
        return DiagonalOperatorSpec(self.sigma[:N], self.p1, self.p2, self.label, dict(self.meta))

    @classmethod
    def power_law(cls, t: float, p1: float, p2: float, N: int, log_power: float = 0.0):
        """``sigma_k = k^{-t} (1 + log2 k)^{log_power}`` (running minimum)."""
        k = np.arange(1, N + 1, dtype=float)
        s = np.minimum.accumulate(k ** (-t) * (1 + np.log2(k)) ** log_power)
        return cls(s, p1, p2, "power", {"t": t, "log_power": log_power})

    @classmethod
    def block_radial(cls, dec: BlockDecomposition, p1: float, p2: float, N: int = DEFAULT_N_CAP,
                     power: float | None = None):
        return cls(block_radial_sigma(N, dec, p1, p2, power), p1, p2, "block-radial",
                   {"gamma": list(dec.input_gamma), "power": power})

    def to_json(self) -> str:
        out = {"p1": _json_exp(self.p1), "p2": _json_exp(self.p2), "N": self.N, "label": self.label}
        if self.label == "block-radial":
            out.update({"gamma": self.meta["gamma"], "power": self.meta.get("power")})
        else:
            out["sigma"] = self.sigma.tolist()
        return json.dumps(out)

    @classmethod
    def from_json(cls, text: str) -> "DiagonalOperatorSpec":
        data = json.loads(text)
        try:
            p1, p2 = _parse_exp(data["p1"]), _parse_exp(data["p2"])
        except KeyError as exc:
            raise InputError(f"operator spec JSON is missing {exc}") from None
        if "sigma" in data:
            return cls(np.asarray(data["sigma"], dtype=float), p1, p2)
        if "gamma" not in data:
            raise InputError("operator spec JSON needs 'sigma' or 'gamma'")
        N = int(data.get("N", DEFAULT_N_CAP))
        return cls.block_radial(BlockDecomposition(data["gamma"]), p1, p2, N, data.get("power"))


def _json_exp(p: float):
    return "inf" if math.isinf(p) else p


def _parse_exp(v) -> float:
    if isinstance(v, str):
        if v.lower() in ("inf", "infinity"):
            return math.inf
        return float(v)
    return float(v)


def kuhn_rate(k: int, spec: DiagonalOperatorSpec, alpha: float | None = None,
              horizon: int | None = None) -> float:
    """Predicted entropy-number order ``k^{1/p2 - 1/p1} sigma_k``.

    When ``alpha`` is given, the regularity condition is checked first on the
    realized range and a :class:`PreconditionWarning` is issued if it fails.
    """
    if k < 1 or k > spec.N:
        raise InputError(f"k must lie in 1..{spec.N}, got {k}")
    if alpha is not None:
        res = check_adw(spec, alpha, horizon or spec.N)
        floor = max(_inv(spec.p2) - _inv(spec.p1), 0.0)
        if not res.holds or alpha <= floor:
            warnings.warn(f"regularity check failed for alpha={alpha}: sup={res.sup:.3g} "
                          f"at {res.witness}", PreconditionWarning, stacklevel=2)
    return float(k ** (_inv(spec.p2) - _inv(spec.p1)) * spec.sigma[k - 1])


@dataclass(frozen=True)
class AdwResult:
    holds: bool
    sup: float
    witness: tuple[int, int]
    sup_quarter: float

    def __bool__(self):
        return self.holds


def check_adw(spec: DiagonalOperatorSpec | Callable[[np.ndarray], np.ndarray], alpha: float,
              horizon: int, tol: float = 0.05) -> AdwResult:
    """Finite-horizon check of ``sup_{n >= k} (sigma_n / sigma_k) (n/k)^alpha < inf``.

    ``S(H)`` is the supremum over ``1 <= k <= n <= H``; the condition is
    declared to hold when ``S(H) <= (1 + tol) S(H/4)``, i.e. the supremum has
    stopped growing over the last two octaves.  ``witness`` is the maximizing
    pair ``(k, n)``.
    """
    if horizon < 2:
        raise InputError(f"horizon must be >= 2, got {horizon}")
    if callable(spec):
        sig = np.asarray(spec(np.arange(1, horizon + 1)), dtype=float)
    else:
        if horizon > spec.N:
            raise InputError(f"horizon {horizon} exceeds the {spec.N} realized values")
        sig = spec.sigma[:horizon]
    k = np.arange(1, horizon + 1, dtype=float)
    la = np.log(sig) + alpha * np.log(k)

    def sup_upto(H: int):
        a = la[:H]
        suf = np.maximum.accumulate(a[::-1])[::-1]
        arg_suf = _suffix_argmax(a)
        r = suf - a
        i = int(np.argmax(r))
        return float(np.exp(r[i])), (i + 1, int(arg_suf[i]) + 1)

    full, wit = sup_upto(horizon)
    quarter, _ = sup_upto(max(1, horizon // 4))
    return AdwResult(full <= (1 + tol) * quarter, full, wit, quarter)


def _suffix_argmax(a: np.ndarray) -> np.ndarray:
    out = np.empty(len(a), dtype=np.int64)
    best = len(a) - 1
    for i in range(len(a) - 1, -1, -1):
        if a[i] > a[best]:
            best = i
        out[i] = best
    return out


def doubling_constant(spec: DiagonalOperatorSpec) -> float:
    """``max sigma_k / sigma_{2k}`` over the realized range."""
    s = spec.sigma
    half = len(s) // 2
    if half == 0:
        return 1.0
    return float(np.max(s[:half] / s[1:2 * half:2]))


def schutt_rate(k: int, N: int | None, p1: float, p2: float) -> float:
    """``k^{-(1/p1 - 1/p2)}``, the rate of ``e_k(id: l_{p1}^N -> l_{p2}^N)`` for ``k >= N``.

    ``N=None`` takes ``N = k``.  Other regimes are not implemented.
    """
    _check_exponent("p1", p1)
    _check_exponent("p2", p2)
    if not p1 < p2:
        raise ParameterError(f"need p1 < p2, got p1={p1}, p2={p2}")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    if N is not None and k < N:
        raise UnsupportedRegimeError(f"only the regime k >= N is implemented (k={k}, N={N})")
    return float(k ** (-(_inv(p1) - _inv(p2))))


# ---------------------------------------------------------------------------
# entropy-number bounds


def _check_caps(spec: DiagonalOperatorSpec, k: int, n_cap: int, k_cap: int) -> None:
    if spec.N > n_cap:
        raise ResourceError(f"truncation N={spec.N} exceeds cap {n_cap}")
    if k < 1 or k > k_cap:
        raise ResourceError(f"k={k} outside 1..{k_cap}")


def covering_radius(sigma: np.ndarray, cells: np.ndarray, p1: float, p2: float) -> float:
    """Certified ``l_{p2}`` radius of a product-grid covering of ``D_sigma(B_{p1})``.

    Coordinate ``i`` is split into ``cells[i]`` equal intervals of
    ``[-sigma_i, sigma_i]`` with half-width ``h_i = sigma_i / cells[i]``.
    An odd split has a cell centred at 0, so its error is also at most
    ``sigma_i |x_i|``.  For ``p2 < inf`` the bound is
    ``min_S sum_{i in S} h_i^{p2} + max_{i not in S} sigma_i^{p1} h_i^{p2-p1}``
    over sets ``S`` containing every even split.
    """
    sigma = np.asarray(sigma, dtype=float)
    cells = np.asarray(cells, dtype=np.int64)
    h = sigma / cells
    if math.isinf(p2):
        return float(np.max(h))
    if not p1 <= p2:
        raise ParameterError(f"covering bound needs p1 <= p2, got p1={p1}, p2={p2}")
    forced = cells % 2 == 0
    hp = h ** p2
    free = np.flatnonzero(~forced)
    c = sigma[free] ** p1 * h[free] ** (p2 - p1) if not math.isinf(p1) else hp[free]
    if math.isinf(p1):
        # every coordinate of the l_inf ball can be extreme: the sum is the bound
        return float(np.sum(hp)) ** (1.0 / p2)
    base = float(np.sum(hp[forced]))
    order = np.argsort(-c, kind="stable")
    c_sorted, hp_sorted = c[order], hp[free][order]
    best = base + (float(c_sorted[0]) if len(c_sorted) else 0.0)
    acc = base
    for j in range(len(c_sorted)):
        acc += float(hp_sorted[j])
        tail = float(c_sorted[j + 1]) if j + 1 < len(c_sorted) else 0.0
        best = min(best, acc + tail)
    return best ** (1.0 / p2)


def _grid_for_width(sigma: np.ndarray, t: float, J: int) -> np.ndarray:
    n = np.ones(len(sigma), dtype=np.int64)
    n[:J] = np.maximum(1, np.ceil(sigma[:J] / t - 1e-12)).astype(np.int64)
    return n


def _log2_prod(n: np.ndarray) -> float:
    return float(np.sum(np.log2(n)))


def covering_grid(spec: DiagonalOperatorSpec, k: int) -> np.ndarray:
    """Deterministic choice of cells per coordinate with ``prod cells <= 2^{k-1}``.

    For every prefix length ``J`` the common half-width ``t`` of the first
    ``J`` coordinates is bisected to the smallest value that fits the budget;
    the best certified radius wins and spare budget is spent greedily on the
    coordinate with the largest half-width.
    """
    sigma = spec.sigma
    budget_bits = k - 1
    best_n, best_r = np.ones(spec.N, dtype=np.int64), math.inf
    for J in range(0, spec.N + 1):
        if J == 0:
            n = np.ones(spec.N, dtype=np.int64)
        else:
            lo, hi = 0.0, float(sigma[0])
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if mid <= 0:
                    break
                if _log2_prod(_grid_for_width(sigma, mid, J)) <= budget_bits + 1e-12:
                    hi = mid
                else:
                    lo = mid
            n = _grid_for_width(sigma, hi, J)
            if _log2_prod(n) > budget_bits + 1e-12:
                continue
        n = _fill(sigma, n, budget_bits, spec.p1, spec.p2)
        r = covering_radius(sigma, n, spec.p1, spec.p2)
        if r < best_r - 1e-15:
            best_n, best_r = n, r
    return best_n


def _fill(sigma, n, budget_bits, p1, p2):
    """Greedy +1 refinements while the cell budget allows and the radius improves."""
    n = n.copy()
    cur = covering_radius(sigma, n, p1, p2)
    while True:
        used = _log2_prod(n)
        best = None
        for i in np.argsort(-(sigma / n), kind="stable")[:8]:
            if used - math.log2(n[i]) + math.log2(n[i] + 1) > budget_bits + 1e-12:
                continue
            n[i] += 1
            r = covering_radius(sigma, n, p1, p2)
            n[i] -= 1
            if r < cur - 1e-15 and (best is None or r < best[0]):
                best = (r, i)
        if best is None:
            return n
        cur, i = best
        n[i] += 1


def entropy_upper_bound(spec: DiagonalOperatorSpec, k: int, *, n_cap: int = DEFAULT_N_CAP,
                        k_cap: int = DEFAULT_K_CAP) -> float:
    """Radius of an explicit covering of ``D_sigma(B_{p1}^N)`` by at most ``2^{k-1}`` ``l_{p2}`` balls.

    Entropy numbers do not increase with ``k``, so the smallest certified
    radius over budgets ``2^{k'-1}``, ``k' <= k``, is returned.
    """
    _check_caps(spec, k, n_cap, k_cap)
    key = (spec.sigma.tobytes(), float(spec.p1), float(spec.p2))
    return min(_grid_bound(key, kk) for kk in range(1, k + 1))


@functools.lru_cache(maxsize=4096)
def _grid_bound(key, k: int) -> float:
    sigma = np.frombuffer(key[0], dtype=float)
    spec = DiagonalOperatorSpec(sigma.copy(), key[1], key[2])
    n = covering_grid(spec, k)
    return covering_radius(spec.sigma, n, spec.p1, spec.p2)


def entropy_lower_bound(spec: DiagonalOperatorSpec, k: int, *, n_cap: int = DEFAULT_N_CAP,
                        k_cap: int = DEFAULT_K_CAP) -> float:
    """Volume bound ``2^{-(k-1)/N} (prod sigma vol B_{p1}^N / vol B_{p2}^N)^{1/N}``."""
    _check_caps(spec, k, n_cap, k_cap)
    N = spec.N
    logv = float(np.sum(np.log(spec.sigma))) + lp_ball_volume_log(N, spec.p1) - lp_ball_volume_log(N, spec.p2)
    return float(math.exp(-(k - 1) * math.log(2) / N + logv / N))


@dataclass
class RateRow:
    k: int
    lower_bound: float
    upper_bound: float
    kuhn_rate: float
    schutt_rate: float


def rate_table(spec: DiagonalOperatorSpec, ks: Sequence[int]) -> list[RateRow]:
    rows = []
    for k in ks:
        sr = schutt_rate(k, None, spec.p1, spec.p2) if spec.p1 < spec.p2 else float("nan")
        rows.append(RateRow(int(k), entropy_lower_bound(spec, k), entropy_upper_bound(spec, k),
                            kuhn_rate(k, spec), sr))
    return rows


def rate_table_csv(rows: Sequence[RateRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "lower_bound", "upper_bound", "kuhn_rate", "schutt_rate"])
    for r in rows:
        w.writerow([r.k, repr(r.lower_bound), repr(r.upper_bound), repr(r.kuhn_rate), repr(r.schutt_rate)])
    return buf.getvalue()


def fit_sandwich_constant(rates: Sequence[float], lower: Sequence[float],
                          upper: Sequence[float]) -> tuple[float, float]:
    """Constant ``c`` maximizing the share of ``k`` with ``lower <= c * rate <= upper``.

    Returns ``(c, fraction)``; among optimal constants the geometric middle of
    the best interval is chosen.  Zero rates never fall inside.
    """
    iv = [(lo / r, hi / r) for r, lo, hi in zip(rates, lower, upper) if r > 0 and lo <= hi]
    total = len(rates)
    if not iv or total == 0:
        return float("nan"), 0.0
    events = sorted({v for pair in iv for v in pair})
    best_c, best_cnt = events[0], -1
    for i, c in enumerate(events):
        nxt = events[i + 1] if i + 1 < len(events) else c
        for cand in (c, math.sqrt(c * nxt)):
            cnt = sum(1 for lo, hi in iv if lo <= cand <= hi)
            if cnt > best_cnt:
                best_c, best_cnt = cand, cnt
    return float(best_c), best_cnt / total
