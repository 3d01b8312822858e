"""Block decompositions, block radii, weights and the trace/extension maps.

A block decomposition ``gamma = (g_1, ..., g_m)`` splits R^d into
R^{g_1} x ... x R^{g_m}.  Functions invariant under SO(g_1) x ... x SO(g_m)
depend only on the block radii ``r_j = |x_j|`` and are represented by their
trace on the m-dimensional coordinate plane.  Integrals then pick up the
weight ``prod |r_i|^{g_i - 1}`` and the product of unit-sphere areas.

Points of R^d are always laid out in the *sorted* block order of
:class:`BlockDecomposition`; use :meth:`BlockDecomposition.to_sorted_layout`
to convert a point given in the caller's original block order.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import gammaln
from scipy.stats import special_ortho_group

from blockrad.errors import InputError, InvarianceWarning, ParameterError


@dataclass(frozen=True)
class BlockDecomposition:
    """Block dimensions ``gamma`` with the derived quantities d, m, n, alpha.

    ``gamma`` is stored in ascending order; ``sort_permutation[i]`` is the
    position in the caller's input of the i-th stored block.
    """

    gamma: tuple[int, ...]
    sort_permutation: tuple[int, ...] = field(default=())

    def __init__(self, gamma: Sequence[int]):
        raw = [int(g) for g in gamma]
        if len(raw) == 0:
            raise InputError("block decomposition needs at least one block")
        if any(g != gg for g, gg in zip(raw, gamma)):
            raise InputError(f"block dimensions must be integers, got {list(gamma)}")
        if min(raw) < 2:
            raise InputError(f"every block dimension must be >= 2, got {raw}")
        perm = tuple(sorted(range(len(raw)), key=lambda i: (raw[i], i)))
        object.__setattr__(self, "gamma", tuple(raw[i] for i in perm))
        object.__setattr__(self, "sort_permutation", perm)

    @property
    def d(self) -> int:
        return sum(self.gamma)

    @property
    def m(self) -> int:
        return len(self.gamma)

    @property
    def n(self) -> int:
        """Multiplicity of the smallest block dimension."""
        return sum(1 for g in self.gamma if g == self.gamma[0])

    @property
    def alphas(self) -> tuple[Fraction, ...]:
        """``alpha_i = (g_i - 1) / (d - m)`` as exact rationals."""
        dm = self.d - self.m
        return tuple(Fraction(g - 1, dm) for g in self.gamma)

    @property
    def input_gamma(self) -> tuple[int, ...]:
        out = [0] * self.m
        for stored, original in enumerate(self.sort_permutation):
            out[original] = self.gamma[stored]
        return tuple(out)

    @property
    def offsets(self) -> tuple[int, ...]:
        """Start index of each block inside a point of R^d."""
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(self.gamma)[:-1]]))

    @property
    def hankel_orders(self) -> tuple[float, ...]:
        return tuple(g / 2 - 1 for g in self.gamma)

    def to_sorted_layout(self, x_input) -> np.ndarray:
        """Reorder the blocks of a point given in the caller's input order."""
        x = np.asarray(x_input, dtype=float)
        if x.shape[-1] != self.d:
            raise InputError(f"point has length {x.shape[-1]}, expected d={self.d}")
        gin = self.input_gamma
        starts = np.concatenate([[0], np.cumsum(gin)[:-1]])
        pieces = [x[..., starts[i]:starts[i] + gin[i]] for i in self.sort_permutation]
        return np.concatenate(pieces, axis=-1)

    def to_json(self) -> str:
        return json.dumps({"gamma": list(self.input_gamma)})

    @classmethod
    def from_json(cls, text: str) -> "BlockDecomposition":
        data = json.loads(text)
        if "gamma" not in data:
            raise InputError("block decomposition JSON needs a 'gamma' key")
        return cls(data["gamma"])

    @classmethod
    def parse(cls, text: str) -> "BlockDecomposition":
        """Parse ``"2,3"`` style command-line input."""
        try:
            return cls([int(t) for t in text.replace(" ", "").split(",") if t])
        except ValueError as exc:
            raise InputError(f"cannot parse block dimensions from {text!r}") from exc


@dataclass(frozen=True)
class DyadicCube:
    """``Q = prod_i [2^-nu n_i, 2^-nu (n_i + 1))`` (corner-anchored)."""

    nu: int
    index: tuple[int, ...]

    def __post_init__(self):
        if self.nu < 0:
            raise InputError(f"cube level must be >= 0, got {self.nu}")
        object.__setattr__(self, "index", tuple(int(v) for v in self.index))

    @property
    def side(self) -> Fraction:
        return Fraction(1, 2 ** self.nu)


def sphere_area(k: int) -> float:
    """Surface measure of the unit sphere in R^k, ``2 pi^{k/2} / Gamma(k/2)``."""
    return 2.0 * math.pi ** (k / 2) / math.gamma(k / 2)


def block_constant(dec: BlockDecomposition) -> float:
    """Product of the unit-sphere areas of all blocks."""
    return math.prod(sphere_area(g) for g in dec.gamma)


def block_radii(x, dec: BlockDecomposition) -> np.ndarray:
    """Euclidean norm of every block of ``x`` (vectorized over leading axes)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dec.d:
        raise InputError(f"point has length {x.shape[-1]}, expected d={dec.d}")
    radii = [
        np.linalg.norm(x[..., o:o + g], axis=-1) for o, g in zip(dec.offsets, dec.gamma)
    ]
    return np.stack(radii, axis=-1)


def weight_w_gamma(r, dec: BlockDecomposition) -> np.ndarray | float:
    """``prod_i |r_i|^{g_i - 1}``."""
    r = np.asarray(r, dtype=float)
    if r.shape[-1] != dec.m:
        raise InputError(f"radius vector has length {r.shape[-1]}, expected m={dec.m}")
    powers = np.asarray(dec.gamma, dtype=float) - 1.0
    out = np.prod(np.abs(r) ** powers, axis=-1)
    return float(out) if out.ndim == 0 else out


def _signed_power(a: Fraction, g: int) -> Fraction:
    return a ** g if a >= 0 else -((-a) ** g)


def axis_cube_weight_exact(nu: int, n: int, g: int) -> Fraction:
    """``int_{2^-nu n}^{2^-nu (n+1)} |r|^{g-1} dr`` as an exact rational."""
    a = Fraction(n, 2 ** nu)
    b = Fraction(n + 1, 2 ** nu)
    return (_signed_power(b, g) - _signed_power(a, g)) / g


def cube_weight_exact(cube: DyadicCube, dec: BlockDecomposition) -> Fraction:
    if len(cube.index) != dec.m:
        raise InputError(f"cube index has length {len(cube.index)}, expected m={dec.m}")
    out = Fraction(1)
    for n_i, g in zip(cube.index, dec.gamma):
        out *= axis_cube_weight_exact(cube.nu, n_i, g)
    return out


def cube_weight(cube: DyadicCube, dec: BlockDecomposition) -> float:
    """Weight ``w_gamma(Q)`` of a dyadic cube, evaluated exactly then rounded."""
    return float(cube_weight_exact(cube, dec))


def cube_weight_model(cube: DyadicCube, dec: BlockDecomposition) -> float:
    """The two-sided model ``2^{-nu d} prod max(1, |n_i|)^{g_i - 1}``."""
    val = 2.0 ** (-cube.nu * dec.d)
    for n_i, g in zip(cube.index, dec.gamma):
        val *= max(1, abs(n_i)) ** (g - 1)
    return val


# ---------------------------------------------------------------------------
# quadrature and reduced functions


def radial_rule(T: float, gamma_i: int, panels: int = 8, order: int = 16):
    """Composite Gauss-Legendre rule on ``[0, T]`` with ``r^{gamma_i-1}`` folded in.

    Nodes do not depend on ``gamma_i``; only the weights do.
    """
    if T <= 0:
        raise ParameterError(f"truncation radius must be positive, got {T}")
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, T, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel() * nodes ** (gamma_i - 1)
    return nodes, weights


@dataclass
class ReducedFunction:
    """Samples of a block-radial function on a tensor grid in ``[0, inf)^m``."""

    decomposition: BlockDecomposition
    grid: tuple[np.ndarray, ...]
    values: np.ndarray
    quadrature_weights: tuple[np.ndarray, ...]

    def __post_init__(self):
        dec = self.decomposition
        self.grid = tuple(np.asarray(g, dtype=float) for g in self.grid)
        self.quadrature_weights = tuple(np.asarray(w, dtype=float) for w in self.quadrature_weights)
        self.values = np.asarray(self.values)
        if len(self.grid) != dec.m or len(self.quadrature_weights) != dec.m:
            raise InputError("need one grid axis and one weight vector per block")
        shape = tuple(len(g) for g in self.grid)
        if self.values.shape != shape:
            raise InputError(f"values have shape {self.values.shape}, grid implies {shape}")
        for g, w in zip(self.grid, self.quadrature_weights):
            if len(w) != len(g):
                raise InputError("weight vector length differs from its grid axis")
            if np.any(g < 0) or np.any(np.diff(g) <= 0):
                raise InputError("grid nodes must be nonnegative and strictly increasing")
            if np.any(w <= 0):
                raise InputError("quadrature weights must be positive")

    @property
    def axis_counts(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.grid)

    def points(self) -> np.ndarray:
        """All grid points as an array of shape ``(*axis_counts, m)``."""
        mesh = np.meshgrid(*self.grid, indexing="ij")
        return np.stack(mesh, axis=-1)

    def __call__(self, r) -> np.ndarray:
        """Multilinear interpolation in the block radii (exact on nodes)."""
        r = np.abs(np.asarray(r, dtype=float))
        if all(len(g) >= 2 for g in self.grid):
            interp = RegularGridInterpolator(self.grid, self.values, bounds_error=False, fill_value=None)
            flat = r.reshape(-1, self.decomposition.m)
            return interp(flat).reshape(r.shape[:-1])
        raise InputError("interpolation needs at least two nodes per axis")


def reduced_grid(dec: BlockDecomposition, T: float | Sequence[float] = 8.0,
                 panels: int = 8, order: int = 16):
    """Per-axis radial nodes and weights for :func:`trace`."""
    Ts = [float(T)] * dec.m if np.isscalar(T) else [float(t) for t in T]
    if len(Ts) != dec.m:
        raise InputError("need one truncation radius per block")
    rules = [radial_rule(t, g, panels, order) for t, g in zip(Ts, dec.gamma)]
    return tuple(r[0] for r in rules), tuple(r[1] for r in rules)


def embed_radii(r, dec: BlockDecomposition) -> np.ndarray:
    """Map block radii to the point ``(r_1, 0, .., 0, r_2, 0, ..)`` of R^d."""
    r = np.asarray(r, dtype=float)
    x = np.zeros(r.shape[:-1] + (dec.d,))
    for j, o in enumerate(dec.offsets):
        x[..., o] = r[..., j]
    return x


def trace(f: Callable[[np.ndarray], np.ndarray], dec: BlockDecomposition, *,
          T: float | Sequence[float] = 8.0, panels: int = 8, order: int = 16,
          grid=None, audit: bool = False, audit_tol: float = 1e-8,
          audit_rotations: int = 4, seed: int = 0) -> ReducedFunction:
    """Restrict a block-radial ``f`` (vectorized over points of R^d) to the grid.

    With ``audit=True`` the function is also evaluated at randomly rotated
    copies of a subsample of grid points; deviations above ``audit_tol`` raise
    an :class:`InvarianceWarning` (the trace is still returned).
    """
    if grid is None:
        nodes, weights = reduced_grid(dec, T, panels, order)
    else:
        nodes, weights = grid
    mesh = np.stack(np.meshgrid(*nodes, indexing="ij"), axis=-1)
    x = embed_radii(mesh, dec)
    values = np.asarray(f(x.reshape(-1, dec.d))).reshape(mesh.shape[:-1])
    g = ReducedFunction(dec, tuple(nodes), values, tuple(weights))
    if audit:
        dev = invariance_deviation(f, dec, mesh.reshape(-1, dec.m), values.ravel(),
                                   rotations=audit_rotations, seed=seed)
        if dev > audit_tol:
            warnings.warn(f"function deviates from block-radial symmetry by {dev:.3e}",
                          InvarianceWarning, stacklevel=2)
    return g


def random_block_rotation(dec: BlockDecomposition, rng: np.random.Generator) -> np.ndarray:
    """Block-diagonal d x d matrix with a Haar-random SO(g_i) element per block."""
    R = np.zeros((dec.d, dec.d))
    for o, g in zip(dec.offsets, dec.gamma):
        R[o:o + g, o:o + g] = special_ortho_group.rvs(g, random_state=rng)
    return R


def invariance_deviation(f, dec: BlockDecomposition, radii: np.ndarray, values: np.ndarray,
                         rotations: int = 4, sample: int = 256, seed: int = 0) -> float:
    """Max ``|f(g x) - f(x)|`` over random block rotations of sampled points."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(radii), size=min(sample, len(radii)), replace=False)
    x = embed_radii(radii[idx], dec)
    ref = values[idx]
    worst = 0.0
    for _ in range(rotations):
        R = random_block_rotation(dec, rng)
        worst = max(worst, float(np.max(np.abs(np.asarray(f(x @ R.T)) - ref))))
    return worst


def extend(g, x, dec: BlockDecomposition | None = None):
    """Evaluate the block-radial extension of ``g`` at points ``x`` of R^d.

    ``g`` is a :class:`ReducedFunction` or a callable of the radius vector
    (then ``dec`` is required).
    """
    if isinstance(g, ReducedFunction):
        dec = g.decomposition
    elif dec is None:
        raise InputError("extend of a plain callable needs the block decomposition")
    r = block_radii(x, dec)
    out = g(r)
    return float(out) if np.ndim(out) == 0 else np.asarray(out)


def lp_norm_reduced(g: ReducedFunction, p: float) -> float:
    """Full-space ``L_p(R^d)`` norm of ``ext g`` from the weighted reduced integral.

    ``p = inf`` returns the sample maximum (a lower bound on the essential sup).
    """
    if not p >= 1:
        raise ParameterError(f"p must be >= 1, got {p}")
    a = np.abs(g.values)
    if math.isinf(p):
        return float(a.max()) if a.size else 0.0
    integrand = a ** p
    for w in reversed(g.quadrature_weights):
        integrand = integrand @ w
    total = block_constant(g.decomposition) * float(integrand)
    return total ** (1.0 / p)


def lp_ball_volume_log(N: int, p: float) -> float:
    """``log vol(B_p^N)``; shared with the entropy bounds."""
    if math.isinf(p):
        return N * math.log(2.0)
    return N * (math.log(2.0) + float(gammaln(1.0 + 1.0 / p))) - float(gammaln(1.0 + N / p))


# ---------------------------------------------------------------------------
# serialization


def write_reduced_csv(g: ReducedFunction) -> str:
    """CSV text: a header ``axis_counts,gamma`` line, its values, then sample rows."""
    dec = g.decomposition
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis_counts", "gamma"])
    w.writerow([" ".join(map(str, g.axis_counts)), " ".join(map(str, dec.input_gamma))])
    m = dec.m
    w.writerow([f"i{k + 1}" for k in range(m)] + [f"r{k + 1}" for k in range(m)] + ["value"])
    for idx in np.ndindex(*g.axis_counts):
        r = [repr(float(g.grid[k][idx[k]])) for k in range(m)]
        v = g.values[idx]
        w.writerow(list(map(str, idx)) + r + [repr(complex(v)) if np.iscomplexobj(v) else repr(float(v))])
    return buf.getvalue()


def read_reduced_csv(text: str, quadrature_weights=None) -> ReducedFunction:
    """Inverse of :func:`write_reduced_csv`.

    Weights are not serialized; without ``quadrature_weights`` a trapezoid
    rule times ``r^{g_i-1}`` is rebuilt from the nodes.
    """
    rows = list(csv.reader(io.StringIO(text)))
    if len(rows) < 3 or rows[0][:2] != ["axis_counts", "gamma"]:
        raise InputError("not a reduced-function CSV (missing axis_counts,gamma header)")
    counts = tuple(int(v) for v in rows[1][0].split())
    dec = BlockDecomposition([int(v) for v in rows[1][1].split()])
    m = dec.m
    grid = [np.zeros(c) for c in counts]
    complex_vals = any("j" in r[-1] for r in rows[3:])
    values = np.zeros(counts, dtype=complex if complex_vals else float)
    for row in rows[3:]:
        idx = tuple(int(v) for v in row[:m])
        for k in range(m):
            grid[k][idx[k]] = float(row[m + k])
        values[idx] = complex(row[-1]) if complex_vals else float(row[-1])
    if quadrature_weights is None:
        quadrature_weights = []
        for nodes, gi in zip(grid, dec.gamma):
            tw = np.zeros_like(nodes)
            dx = np.diff(nodes)
            tw[:-1] += dx / 2
            tw[1:] += dx / 2
            quadrature_weights.append(np.maximum(tw, 1e-300) * np.maximum(nodes, 1e-300) ** (gi - 1))
    return ReducedFunction(dec, tuple(grid), values, tuple(quadrature_weights))
