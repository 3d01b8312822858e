"""Bound-state counts for ``(theta - Laplace)^{s/2} - beta V`` with block-radial ``V``.

Block-radial functions are discretized per block by a discrete Hankel
transform of order ``nu_i = g_i/2 - 1`` on ``[0, T_i]``.  In the nodal
coordinates ``u_k = sqrt(W_k) r_k^nu f(r_k)`` the transform is an orthogonal
matrix, ``L_2(r^{g-1} dr)`` inner products become Euclidean ones, and
``(theta - Laplace)^{-s/2}`` is the multiplier ``(theta + |rho|^2)^{-s/2}``
on the tensor frequency grid.  Potentials act diagonally on nodal values.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.optimize import brentq
from scipy.special import jn_zeros, jv, spherical_jn

from blockrad._parallel import ordered_map
from blockrad.errors import (
    GridQualityError, GridResolutionWarning, InputError, InsufficientDataError, NumericalError,
    ParameterError, ResolutionError, ResourceError,
)
from blockrad.geometry import BlockDecomposition, block_constant, radial_rule
from blockrad.seqspace import DiagonalOperatorSpec, entropy_upper_bound

MAX_DENSE = 8192
BOUNDARY_RTOL = 1e-12


# ---------------------------------------------------------------------------
# Bessel functions


def _check_order(nu: float) -> None:
    if not (2 * nu + 2) == int(2 * nu + 2) or nu < 0:
        raise InputError(f"order must be k/2 - 1 >= 0 for an integer k, got {nu}")


def bessel_j(nu: float, x) -> np.ndarray | float:
    """``J_nu(x)`` for ``nu`` in {0, 1/2, 1, 3/2, ...} and ``x >= 0``.

    Half-integer orders go through the spherical Bessel functions,
    ``J_{l+1/2}(x) = sqrt(2x/pi) j_l(x)``; integer orders through
    :func:`scipy.special.jv`.
    """
    _check_order(nu)
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise InputError("bessel_j is only defined here for x >= 0")
    if float(nu).is_integer():
        out = jv(nu, x)
    else:
        ell = int(nu - 0.5)
        out = np.sqrt(2 * x / np.pi) * spherical_jn(ell, x)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"J_{nu} evaluation produced non-finite values")
    return float(out) if out.ndim == 0 else out


def bessel_zeros(nu: float, count: int) -> np.ndarray:
    """First ``count`` positive zeros of ``J_nu``."""
    _check_order(nu)
    if float(nu).is_integer():
        return jn_zeros(int(nu), count)
    if nu == 0.5:
        return np.pi * np.arange(1, count + 1, dtype=float)
    # McMahon guesses bracket each zero to within half a spacing
    out = np.empty(count)
    for k in range(1, count + 1):
        b = (k + nu / 2 - 0.25) * np.pi
        guess = b - (4 * nu * nu - 1) / (8 * b)
        lo, hi = guess - 1.2, guess + 1.2
        lo = max(lo, 1e-6 if k == 1 else out[k - 2] + 1e-6)
        f = lambda x: bessel_j(nu, x)
        while f(lo) * f(hi) > 0:
            hi += 0.5
        out[k - 1] = brentq(f, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=200)
    if np.any(np.diff(out) < 2.0):
        raise NumericalError(f"zero search for J_{nu} lost a root")
    return out


# ---------------------------------------------------------------------------
# grids


@dataclass
class AxisGrid:
    """One block's discrete Hankel transform on ``[0, T]`` with ``N`` nodes."""

    gamma: int
    N: int
    T: float
    zeros: np.ndarray            # j_1 .. j_{N+1}
    nodes: np.ndarray            # r_k = j_k T / j_{N+1}
    freqs: np.ndarray            # rho_n = j_n / T
    nodal_weights: np.ndarray    # W_k with sum W_k g(r_k) ~ int_0^T g(r) r dr
    transform: np.ndarray        # orthogonal N x N matrix
    residual: float              # ||T T^t - I||_2 before orthogonalization

    @property
    def nu(self) -> float:
        return self.gamma / 2 - 1

    @property
    def scale(self) -> np.ndarray:
        """``sqrt(W_k) r_k^nu``: nodal value -> orthonormal coordinate."""
        return np.sqrt(self.nodal_weights) * self.nodes ** self.nu

    @property
    def quadrature_weights(self) -> np.ndarray:
        """Weights for ``int_0^T g(r) r^{gamma-1} dr``."""
        return self.nodal_weights * self.nodes ** (2 * self.nu)

    @property
    def spacing(self) -> float:
        return float(np.max(np.diff(np.concatenate([[0.0], self.nodes]))))


def hankel_matrix(nu: float, N: int):
    """Symmetric discrete Hankel kernel of order ``nu`` and the Bessel zeros it uses."""
    j = bessel_zeros(nu, N + 1)
    jN, jj = j[-1], j[:-1]
    J1 = np.abs(bessel_j(nu + 1, jj))
    M = 2.0 * bessel_j(nu, np.outer(jj, jj) / jN) / (jN * np.outer(J1, J1))
    return 0.5 * (M + M.T), j


def build_axis(gamma: int, N: int, T: float) -> AxisGrid:
    nu = gamma / 2 - 1
    M, j = hankel_matrix(nu, N)
    residual = float(np.linalg.norm(M @ M.T - np.eye(N), 2))
    U, _, Vt = np.linalg.svd(M)
    Q = U @ Vt
    Q = 0.5 * (Q + Q.T)
    jN, jj = j[-1], j[:-1]
    W = 2.0 * T ** 2 / (jN ** 2 * bessel_j(nu + 1, jj) ** 2)
    return AxisGrid(gamma, N, float(T), j, jj * T / jN, jj / T, W, Q, residual)


@dataclass
class ReducedGrid:
    dec: BlockDecomposition
    axes: tuple[AxisGrid, ...]

    @property
    def unitarity_residual(self) -> float:
        return max(a.residual for a in self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.N for a in self.axes)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def symbol_base(self) -> np.ndarray:
        """``|rho|^2`` on the tensor frequency grid (flattened, C order)."""
        out = np.zeros(self.shape)
        for i, a in enumerate(self.axes):
            sh = [1] * len(self.axes)
            sh[i] = a.N
            out = out + (a.freqs ** 2).reshape(sh)
        return out.ravel()


def build_grid(dec: BlockDecomposition, N: int | Sequence[int], T: float | Sequence[float],
               max_residual: float = 1e-3) -> ReducedGrid:
    """Per-block discrete Hankel grids.

    Raises
    ------
    GridQualityError
        If the raw unitarity residual of some axis exceeds ``max_residual``.
    """
    Ns = [int(N)] * dec.m if np.isscalar(N) else [int(v) for v in N]
    Ts = [float(T)] * dec.m if np.isscalar(T) else [float(v) for v in T]
    if len(Ns) != dec.m or len(Ts) != dec.m:
        raise InputError("need one node count and one radius per block")
    if min(Ns) < 8:
        raise InputError(f"need at least 8 nodes per axis, got {Ns}")
    if min(Ts) <= 0:
        raise InputError("truncation radii must be positive")
    cache: dict = {}
    axes = []
    for g, n, t in zip(dec.gamma, Ns, Ts):
        key = (g, n, t)
        if key not in cache:
            cache[key] = build_axis(g, n, t)
        axes.append(cache[key])
    grid = ReducedGrid(dec, tuple(axes))
    if grid.unitarity_residual > max_residual:
        raise GridQualityError(f"unitarity residual {grid.unitarity_residual:.2e} exceeds {max_residual:.0e}")
    return grid


# ---------------------------------------------------------------------------
# potentials and specs


@dataclass
class PotentialSpec:
    """Nonnegative block-radial potential.

    ``kind="annulus"``: ``V = c`` on ``A = {rho_i <= r_i <= rho_i + delta}``,
    zero elsewhere, with ``c`` fixed by ``C_gamma int V^r w = 1``.
    ``kind="custom"``: ``V = c * profile(r)`` for a vectorized ``profile`` of
    the radius vector supported in ``prod [0, support_i]``.
    """

    kind: str = "annulus"
    rho: tuple[float, ...] = ()
    delta: float = 1.0
    profile: Callable[[np.ndarray], np.ndarray] | None = None
    support: tuple[float, ...] = ()
    normalize: bool = True
    amplitude: float | None = None

    def __post_init__(self):
        if self.kind not in ("annulus", "custom"):
            raise InputError(f"unknown potential kind {self.kind!r}")
        self.rho = tuple(float(v) for v in self.rho)
        self.support = tuple(float(v) for v in self.support)
        if self.kind == "annulus":
            if not self.rho or min(self.rho) < 1:
                raise ParameterError(f"annulus radii must be >= 1, got {self.rho}")
            if not self.delta > 0:
                raise ParameterError(f"annulus width must be positive, got {self.delta}")
        elif self.profile is None or not self.support:
            raise InputError("custom potentials need a profile and per-block support radii")

    def outer_radii(self) -> tuple[float, ...]:
        if self.kind == "annulus":
            return tuple(r + self.delta for r in self.rho)
        return self.support

    def constant(self, dec: BlockDecomposition, r_leb: float) -> float:
        """Amplitude ``c`` with ``C_gamma int V^r w = 1`` (or the fixed amplitude)."""
        if self.amplitude is not None or not self.normalize:
            return 1.0 if self.amplitude is None else float(self.amplitude)
        if self.kind == "annulus":
            mass = block_constant(dec) * math.prod(
                ((p + self.delta) ** g - p ** g) / g for p, g in zip(self.rho, dec.gamma))
            return mass ** (-1.0 / r_leb)
        rules = [radial_rule(t, g, panels=32, order=16) for t, g in zip(self.support, dec.gamma)]
        mesh = np.stack(np.meshgrid(*[r[0] for r in rules], indexing="ij"), -1)
        vals = np.abs(np.asarray(self.profile(mesh), dtype=float)) ** r_leb
        for w in reversed([r[1] for r in rules]):
            vals = vals @ w
        mass = block_constant(dec) * float(vals)
        if mass <= 0:
            raise ParameterError("potential profile vanishes; disable normalization for V = 0")
        return mass ** (-1.0 / r_leb)

    def nodal_values(self, grid: ReducedGrid, r_leb: float) -> np.ndarray:
        """Potential on the tensor node grid (flattened).

        Annulus indicators use the exact ``r^{g-1}``-weighted average over each
        node's cell (midpoints between nodes), which keeps the total mass.
        """
        c = self.constant(grid.dec, r_leb)
        if self.kind == "annulus":
            out = np.ones(1)
            for a, p in zip(grid.axes, self.rho):
                out = np.kron(out, cell_average(a.nodes, a.gamma, p, p + self.delta))
            return c * out
        mesh = np.stack(np.meshgrid(*[a.nodes for a in grid.axes], indexing="ij"), -1)
        vals = np.asarray(self.profile(mesh), dtype=float).ravel()
        if np.any(vals < 0):
            raise ParameterError("potential must be nonnegative")
        return c * vals

    def to_dict(self) -> dict:
        if self.kind != "annulus":
            raise InputError("only annulus potentials serialize to JSON")
        return {"kind": "annulus", "rho": list(self.rho), "delta": self.delta}


def cell_average(nodes: np.ndarray, gamma: int, a: float, b: float) -> np.ndarray:
    """Fraction of each node cell's ``r^{g-1}`` mass that lies in ``[a, b]``."""
    mid = np.concatenate([[0.0], 0.5 * (nodes[1:] + nodes[:-1]), [nodes[-1] + 0.5 * (nodes[-1] - nodes[-2])]])
    lo, hi = mid[:-1], mid[1:]
    F = lambda x: x ** gamma / gamma
    A, B = np.maximum(lo, a), np.minimum(hi, b)
    num = np.where(B > A, F(B) - F(A), 0.0)
    return num / (F(hi) - F(lo))


@dataclass
class SchrodingerSpec:
    """``H = (theta - Laplace)^{s/2} - beta V`` on block-radial functions."""

    s: float
    theta: float
    beta: float
    r_lebesgue: float
    dec: BlockDecomposition
    potential: PotentialSpec

    def __post_init__(self):
        if not self.s > 0:
            raise ParameterError(f"s must be positive, got {self.s}")
        if not 0 < self.theta <= 1:
            raise ParameterError(f"theta must lie in (0, 1], got {self.theta}")
        if not self.beta >= 0:
            raise ParameterError(f"beta must be nonnegative, got {self.beta}")
        if not 1 < self.r_lebesgue < math.inf:
            raise ParameterError(f"r must lie in (1, inf), got {self.r_lebesgue}")
        if not self.s / self.dec.d > 1 / self.r_lebesgue:
            raise ParameterError(f"need s/d > 1/r, got s/d={self.s / self.dec.d:.4g}, 1/r={1 / self.r_lebesgue:.4g}")
        if self.potential.kind == "annulus" and len(self.potential.rho) != self.dec.m:
            raise InputError("need one annulus radius per block")

    def with_beta(self, beta: float) -> "SchrodingerSpec":
        return SchrodingerSpec(self.s, self.theta, beta, self.r_lebesgue, self.dec, self.potential)

    def default_T(self) -> tuple[float, ...]:
        return tuple(4.0 * r for r in self.potential.outer_radii())

    def to_json(self) -> str:
        return json.dumps({"s": self.s, "theta": self.theta, "beta": self.beta, "r": self.r_lebesgue,
                           "gamma": list(self.dec.input_gamma), "potential": self.potential.to_dict()})

    @classmethod
    def from_json(cls, text: str) -> "SchrodingerSpec":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"spec is not valid JSON: {exc}") from None
        try:
            pot = data["potential"]
            dec = BlockDecomposition(data["gamma"])
            # the potential radii follow the caller's block order
            rho = [float(pot["rho"][i]) for i in dec.sort_permutation]
            potential = PotentialSpec(pot.get("kind", "annulus"), tuple(rho), float(pot.get("delta", 1.0)))
            return cls(float(data["s"]), float(data.get("theta", 1.0)), float(data.get("beta", 1.0)),
                       float(data["r"]), dec, potential)
        except (KeyError, TypeError, IndexError) as exc:
            raise InputError(f"spec JSON is missing or malformed: {exc}") from None


# ---------------------------------------------------------------------------
# Birman-Schwinger operator


@dataclass
class BSOperator:
    """``K = sqrt(V) (theta - Laplace)^{-s/2} sqrt(V)`` restricted to the support of ``V``."""

    matrix: np.ndarray
    support: np.ndarray          # flat node indices carrying the rows/cols of ``matrix``
    grid: ReducedGrid
    asymmetry: float
    _eig: np.ndarray | None = field(default=None, repr=False)

    @property
    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues in descending order (computed once)."""
        if self._eig is None:
            if self.matrix.size == 0:
                self._eig = np.zeros(0)
            else:
                try:
                    ev = linalg.eigh(self.matrix, eigvals_only=True, driver="ev")
                except linalg.LinAlgError as exc:
                    raise NumericalError(f"symmetric eigensolver failed: {exc}") from None
                self._eig = ev[::-1].copy()
        return self._eig


def _symbol(spec: SchrodingerSpec, grid: ReducedGrid, power: float) -> np.ndarray:
    return (spec.theta + grid.symbol_base) ** power


def _check_truncation(spec: SchrodingerSpec, grid: ReducedGrid) -> None:
    for a, R in zip(grid.axes, spec.potential.outer_radii()):
        if not a.T > R:
            raise ParameterError(f"truncation radius {a.T} must exceed the potential support {R}")


def _transform_columns(grid: ReducedGrid, cols: Sequence[np.ndarray]) -> np.ndarray:
    """Kronecker product of per-axis transform column blocks."""
    out = np.ones((1, 1))
    for a, c in zip(grid.axes, cols):
        out = np.kron(out, a.transform[:, c])
    return out


def assemble_bs_operator(spec: SchrodingerSpec, grid: ReducedGrid, restrict: bool = True) -> BSOperator:
    """Assemble the symmetric Birman-Schwinger matrix.

    With ``restrict=True`` only nodes where ``V > 0`` are kept (the other rows
    and columns vanish identically).
    """
    _check_truncation(spec, grid)
    V = spec.potential.nodal_values(grid, spec.r_lebesgue)
    if restrict:
        per_axis = _support_box(V, grid)
        box_flat = _box_flat_indices(per_axis, grid.shape)
        keep = V[box_flat] > 0
        if not np.any(keep):
            return BSOperator(np.zeros((0, 0)), np.zeros(0, dtype=np.int64), grid, 0.0)
        F = _transform_columns(grid, per_axis)[:, keep]
        support = box_flat[keep]
    else:
        if grid.size > MAX_DENSE:
            raise ResourceError(f"full grid of {grid.size} nodes exceeds the dense cap {MAX_DENSE}")
        F = _transform_columns(grid, [np.arange(a.N) for a in grid.axes])
        support = np.arange(grid.size)
    sym = _symbol(spec, grid, -spec.s / 2)
    G = F.T @ (sym[:, None] * F)
    sv = np.sqrt(V[support])
    K = sv[:, None] * G * sv[None, :]
    scale = max(float(np.max(np.abs(K))), 1e-300) if K.size else 1.0
    asym = float(np.max(np.abs(K - K.T))) / scale if K.size else 0.0
    if asym > 1e-8:
        raise NumericalError(f"assembled operator is asymmetric (relative {asym:.2e})")
    return BSOperator(0.5 * (K + K.T), support, grid, asym)


def _support_box(V: np.ndarray, grid: ReducedGrid) -> list[np.ndarray]:
    Vt = V.reshape(grid.shape)
    out = []
    for i in range(len(grid.shape)):
        axes = tuple(k for k in range(len(grid.shape)) if k != i)
        out.append(np.flatnonzero(np.any(Vt > 0, axis=axes) if axes else Vt > 0))
    return out


def _box_flat_indices(per_axis: Sequence[np.ndarray], shape) -> np.ndarray:
    mesh = np.meshgrid(*per_axis, indexing="ij")
    return np.ravel_multi_index(tuple(m.ravel() for m in mesh), shape)


def count_from_eigenvalues(mu: np.ndarray, beta: float) -> int:
    """``#{mu >= 1/beta}``; values within a relative ``1e-12`` of the threshold count."""
    if beta <= 0:
        return 0
    return int(np.sum(mu >= (1.0 / beta) * (1 - BOUNDARY_RTOL)))


def bs_count(spec: SchrodingerSpec, grid: ReducedGrid, op: BSOperator | None = None) -> int:
    """Discretized number of eigenvalues of ``H`` in ``(-inf, 0]``."""
    op = op or assemble_bs_operator(spec, grid)
    return count_from_eigenvalues(op.eigenvalues, spec.beta)


def discrete_hamiltonian(spec: SchrodingerSpec, grid: ReducedGrid) -> np.ndarray:
    """Full-grid matrix of ``H`` in nodal orthonormal coordinates (small grids only)."""
    _check_truncation(spec, grid)
    if grid.size > MAX_DENSE:
        raise ResourceError(f"full grid of {grid.size} nodes exceeds the dense cap {MAX_DENSE}")
    F = _transform_columns(grid, [np.arange(a.N) for a in grid.axes])
    H = F.T @ (_symbol(spec, grid, spec.s / 2)[:, None] * F)
    H -= np.diag(spec.beta * spec.potential.nodal_values(grid, spec.r_lebesgue))
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# Max-Min construction


def smoothstep(x, K: int) -> np.ndarray:
    """Polynomial ``S_K`` with ``S_K(0)=0``, ``S_K(1)=1`` and ``K`` vanishing derivatives at both ends."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    poly = sum(math.comb(K + n, n) * math.comb(2 * K + 1, K - n) * (-x) ** n for n in range(K + 1))
    return x ** (K + 1) * poly


def bump(t, width: float, K: int) -> np.ndarray:
    """``eta`` on ``[0, width]``: ramps on the outer quarters, 1 on ``[width/4, 3 width/4]``."""
    t = np.asarray(t, dtype=float)
    q = width / 4
    up = smoothstep(t / q, K)
    down = smoothstep((width - t) / q, K)
    out = np.where(t < q, up, np.where(t > 3 * q, down, 1.0))
    return np.where((t <= 0) | (t >= width), 0.0, out)


def bump_derivative_sup(order: int, K: int, width: float = 1.0) -> float:
    """``max |eta^{(order)}|`` from the ramp polynomial (exact polynomial derivative)."""
    coeffs = np.zeros(2 * K + 2)
    for n in range(K + 1):
        coeffs[K + 1 + n] = math.comb(K + n, n) * math.comb(2 * K + 1, K - n) * (-1) ** n
    p = np.polynomial.Polynomial(coeffs).deriv(order) if order else np.polynomial.Polynomial(coeffs)
    x = np.linspace(0, 1, 4001)
    return float(np.max(np.abs(p(x)))) * (4.0 / width) ** order


@dataclass
class MaxMinFamily:
    """Products of shifted bumps ``psi_{j,nu} = 2^{-j(s-d)/2} prod eta_j(r_i - r^{(i)}_{j,nu_i})``."""

    j: int
    order: int
    delta: float
    rho: tuple[float, ...]
    amplitude: float
    columns: tuple[np.ndarray, ...]   # per axis: nodal values of the 2^j shifted bumps (N_i x 2^j)
    grid: ReducedGrid

    @property
    def size(self) -> int:
        return 2 ** (self.j * len(self.rho))

    def left_edges(self, axis: int) -> np.ndarray:
        return self.rho[axis] + np.arange(2 ** self.j) * 2.0 ** -self.j * self.delta

    def evaluate(self, r: np.ndarray, index: Sequence[int]) -> np.ndarray:
        """``psi_{j, index}`` at radius vectors ``r`` (shape ``(..., m)``)."""
        r = np.asarray(r, dtype=float)
        w = 2.0 ** -self.j * self.delta
        out = np.full(r.shape[:-1], self.amplitude)
        for i, v in enumerate(index):
            out = out * bump(r[..., i] - self.left_edges(i)[v], w, self.order)
        return out

    def plateau_point(self, index: Sequence[int]) -> np.ndarray:
        w = 2.0 ** -self.j * self.delta
        return np.array([self.left_edges(i)[v] + w / 2 for i, v in enumerate(index)])

    def disjoint_on_grid(self) -> bool:
        for c in self.columns:
            overlap = (np.abs(c) > 0).astype(int).T @ (np.abs(c) > 0).astype(int)
            if np.any(overlap - np.diag(np.diag(overlap)) != 0):
                return False
        return True


def resolvable_levels(spec: SchrodingerSpec, grid: ReducedGrid, min_nodes: float = 2.0) -> list[int]:
    """Levels ``j`` whose ramp width ``2^{-j} delta / 4`` spans ``min_nodes`` node spacings on every axis."""
    out = []
    h = max(a.spacing for a in grid.axes)
    j = 0
    while 2.0 ** -j * spec.potential.delta / 4 >= min_nodes * h * (1 - 1e-12):
        out.append(j)
        j += 1
    return out


def build_test_functions(spec: SchrodingerSpec, j: int, grid: ReducedGrid,
                         min_nodes: float = 2.0) -> MaxMinFamily:
    if spec.potential.kind != "annulus":
        raise InputError("the Max-Min family is defined for annulus potentials")
    if j < 0:
        raise InputError(f"level must be >= 0, got {j}")
    if j not in resolvable_levels(spec, grid, min_nodes):
        h = max(a.spacing for a in grid.axes)
        raise ResolutionError(f"ramp width {2.0 ** -j * spec.potential.delta / 4:.4g} is below "
                              f"{min_nodes} node spacings ({h:.4g}); refine the grid")
    K = math.ceil(spec.s) + 1
    d = spec.dec.d
    amp = 2.0 ** (-j * (spec.s - d) / 2)
    width = 2.0 ** -j * spec.potential.delta
    cols = []
    for a, p in zip(grid.axes, spec.potential.rho):
        edges = p + np.arange(2 ** j) * width
        cols.append(bump(a.nodes[:, None] - edges[None, :], width, K))
    fam = MaxMinFamily(j, K, spec.potential.delta, spec.potential.rho, amp, tuple(cols), grid)
    if not fam.disjoint_on_grid():
        raise ResolutionError("test-function supports overlap on the grid")
    return fam


@dataclass
class PencilMatrices:
    A: np.ndarray
    B: np.ndarray
    family: MaxMinFamily
    _gen: np.ndarray | None = field(default=None, repr=False)

    @property
    def generalized_eigenvalues(self) -> np.ndarray:
        """Ascending eigenvalues of ``A x = lambda B x``."""
        if self._gen is None:
            try:
                self._gen = linalg.eigh(self.A, self.B, eigvals_only=True)
            except linalg.LinAlgError as exc:
                raise NumericalError(f"Gram matrix B is not positive definite: {exc}") from None
        return self._gen


def maxmin_matrices(spec: SchrodingerSpec, family: MaxMinFamily) -> PencilMatrices:
    """Quadratic forms ``A = (D^{s/2} psi, psi')`` and ``B = (V psi, psi')`` of the family."""
    grid = family.grid
    nodal = [a.scale[:, None] * c * 1.0 for a, c in zip(grid.axes, family.columns)]
    U = np.ones((1, 1))
    Uh = np.ones((1, 1))
    for a, c in zip(grid.axes, nodal):
        U = np.kron(U, c)
        Uh = np.kron(Uh, a.transform @ c)
    U *= family.amplitude
    Uh *= family.amplitude
    A = Uh.T @ (_symbol(spec, grid, spec.s / 2)[:, None] * Uh)
    V = spec.potential.nodal_values(grid, spec.r_lebesgue)
    B = U.T @ (V[:, None] * U)
    A, B = 0.5 * (A + A.T), 0.5 * (B + B.T)
    bmin = float(np.min(np.linalg.eigvalsh(B))) if B.size else 0.0
    if not bmin > 1e-13 * max(float(np.max(np.abs(B))), 1e-300):
        raise NumericalError(f"Gram matrix B is not positive definite (min eigenvalue {bmin:.3e})")
    return PencilMatrices(A, B, family)


def maxmin_negative_count(spec: SchrodingerSpec, family: MaxMinFamily,
                          pencil: PencilMatrices | None = None) -> int:
    """Number of negative eigenvalues of ``A - beta B`` (generalized eigenvalues below ``beta``)."""
    if spec.beta <= 0:
        return 0
    pencil = pencil or maxmin_matrices(spec, family)
    lam = pencil.generalized_eigenvalues
    return int(np.sum(lam < spec.beta * (1 - BOUNDARY_RTOL)))


def orbit_weights(family: MaxMinFamily, dec: BlockDecomposition) -> np.ndarray:
    """``prod_i k_i^{g_i - 1}`` with ``2^{-j}(k_i - 1) < r^{(i)}_{j,nu_i} <= 2^{-j} k_i``."""
    per_axis = []
    for i, g in enumerate(dec.gamma):
        k = np.ceil(family.left_edges(i) * 2.0 ** family.j - 1e-12)
        per_axis.append(np.maximum(k, 1) ** (g - 1))
    out = np.ones(1)
    for w in per_axis:
        out = np.kron(out, w)
    return out


@dataclass(frozen=True)
class MaxMinConstants:
    C1: float
    C2: float
    levels: tuple[int, ...]


def fit_maxmin_constants(spec: SchrodingerSpec, grid: ReducedGrid,
                         levels: Sequence[int] | None = None) -> MaxMinConstants:
    """Smallest ``C1`` and largest ``C2`` with ``(D psi, psi) <= C1 K`` and ``(V psi, psi) >= C2^2 2^{-js} K``.

    ``K = prod k_i^{g_i-1}``; the fit runs over the resolvable levels.
    """
    levels = list(levels) if levels is not None else resolvable_levels(spec, grid)
    if not levels:
        raise ResolutionError("no Max-Min level is resolvable on this grid")
    c1, c2sq = 0.0, math.inf
    for j in levels:
        fam = build_test_functions(spec, j, grid)
        pm = maxmin_matrices(spec, fam)
        Kw = orbit_weights(fam, spec.dec)
        c1 = max(c1, float(np.max(np.diag(pm.A) / Kw)))
        c2sq = min(c2sq, float(np.min(np.diag(pm.B) * 2.0 ** (j * spec.s) / Kw)))
    return MaxMinConstants(c1, math.sqrt(c2sq), tuple(levels))


def select_level(beta: float, s: float, consts: MaxMinConstants) -> tuple[int, int]:
    """``j = floor(s^{-1} log2(C1^{-1} C2^2 beta))`` and its clip to the resolvable levels."""
    raw = math.floor(math.log2(consts.C2 ** 2 * beta / consts.C1) / s) if beta > 0 else -1
    lo, hi = min(consts.levels), max(consts.levels)
    return raw, int(min(max(raw, lo), hi))


# ---------------------------------------------------------------------------
# Carl check


@dataclass(frozen=True)
class CarlReport:
    passed: bool
    eigenvalues: np.ndarray
    upper_bounds: np.ndarray
    margins: np.ndarray
    violations: tuple[int, ...]


def carl_check(K: np.ndarray | BSOperator, kmax: int = 20, truncation: int = 32,
               strict: bool = True) -> CarlReport:
    """Check ``|lambda_k| <= sqrt(2) e_k`` against certified covering bounds.

    The operator is split as ``K = K_N + R`` with ``K_N`` its top-``N``
    spectral part; ``e_k(K) <= e_k(K_N) + ||R||`` and ``e_k(K_N)`` equals the
    entropy number of ``diag(mu_1..mu_N)`` on ``l_2^N``.
    """
    mu = K.eigenvalues if isinstance(K, BSOperator) else np.sort(np.linalg.eigvalsh(np.asarray(K)))[::-1]
    lam = np.sort(np.abs(mu))[::-1]
    kmax = min(kmax, len(lam))
    if kmax == 0 or lam[0] == 0:
        z = np.zeros(kmax)
        return CarlReport(True, lam[:kmax], z, z, ())
    N = min(truncation, len(lam))
    head = np.maximum(lam[:N], lam[0] * 1e-300)
    rest = float(lam[N]) if len(lam) > N else 0.0
    spec = DiagonalOperatorSpec(head, 2, 2)
    upper = np.array([entropy_upper_bound(spec, k, n_cap=max(64, N)) + rest for k in range(1, kmax + 1)])
    margins = math.sqrt(2) * upper - lam[:kmax]
    viol = tuple(int(k + 1) for k in np.flatnonzero(margins < -1e-12 * lam[0]))
    report = CarlReport(not viol, lam[:kmax], upper, margins, viol)
    if strict and viol:
        raise NumericalError(f"Carl inequality violated at k={list(viol)}")
    return report


# ---------------------------------------------------------------------------
# beta scans


@dataclass
class ScanRow:
    beta: float
    bs_count: int
    maxmin_count: int
    grid_N: int
    unitarity_residual: float
    level: int = -1


@dataclass
class ScanTable:
    rows: list[ScanRow]
    dec: BlockDecomposition
    s: float
    r_lebesgue: float
    constants: MaxMinConstants | None = None
    warnings: list[str] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["beta", "bs_count", "maxmin_count", "grid_N", "unitarity_residual"])
        for r in self.rows:
            w.writerow([repr(float(r.beta)), r.bs_count, r.maxmin_count, r.grid_N,
                        f"{r.unitarity_residual:.6e}"])
        return buf.getvalue()


def geometric_betas(lo: float, hi: float, n: int) -> np.ndarray:
    if n < 2 or not 0 < lo < hi:
        raise InputError(f"geometric grid needs 0 < lo < hi and n >= 2, got {lo}, {hi}, {n}")
    return np.geomspace(lo, hi, n)


def scan_beta(spec: SchrodingerSpec, betas: Sequence[float], N: int = 64,
              T: float | Sequence[float] | None = None, *, maxmin: bool = True,
              level: int | str = "rule", check_N: int | None = None,
              threads: int | None = None) -> ScanTable:
    """Bound-state counts and Max-Min lower counts over a grid of couplings.

    Parameters
    ----------
    level : "rule", "best" or int
        Max-Min level: the coupling-dependent rule with fitted constants
        (clipped to the resolvable levels), the largest count over all
        resolvable levels, or a fixed level.
    check_N : int, optional
        Node count of a finer grid used to re-count at the largest coupling; a
        relative difference above 5% issues a :class:`GridResolutionWarning`.
    """
    betas = [float(b) for b in betas]
    if len(betas) < 6:
        raise InsufficientDataError(f"a scan needs >= 6 couplings, got {len(betas)}")
    T = spec.default_T() if T is None else T
    grid = build_grid(spec.dec, N, T)
    op = assemble_bs_operator(spec, grid)
    mu = op.eigenvalues
    notes: list[str] = []
    consts = None
    pencils: dict[int, PencilMatrices] = {}
    if maxmin:
        levels = resolvable_levels(spec, grid)
        if not levels:
            raise ResolutionError("no Max-Min level is resolvable on this grid")
        if level == "rule":
            consts = fit_maxmin_constants(spec, grid, levels)
        needed = levels if level in ("rule", "best") else [int(level)]
        for jj, pm in zip(needed, ordered_map(
                lambda jj: maxmin_matrices(spec, build_test_functions(spec, jj, grid)), needed, threads)):
            pencils[jj] = pm
    rows = []
    for b in betas:
        bs = count_from_eigenvalues(mu, b)
        mm, lev = 0, -1
        if maxmin:
            if level == "rule":
                _, lev = select_level(b, spec.s, consts)
                mm = _pencil_count(pencils[lev], b)
            elif level == "best":
                counts = {jj: _pencil_count(pm, b) for jj, pm in pencils.items()}
                lev = max(counts, key=lambda jj: (counts[jj], -jj))
                mm = counts[lev]
            else:
                lev = int(level)
                mm = _pencil_count(pencils[lev], b)
        rows.append(ScanRow(b, bs, mm, int(N), grid.unitarity_residual, lev))
    if check_N:
        fine = build_grid(spec.dec, check_N, T)
        top = max(betas)
        c_fine = count_from_eigenvalues(assemble_bs_operator(spec, fine).eigenvalues, top)
        c_here = count_from_eigenvalues(mu, top)
        if abs(c_fine - c_here) > 0.05 * max(c_fine, c_here, 1):
            msg = f"bound-state count at beta={top:.4g} is {c_here} on N={N} but {c_fine} on N={check_N}"
            notes.append(msg)
            warnings.warn(msg, GridResolutionWarning, stacklevel=2)
    return ScanTable(rows, spec.dec, spec.s, spec.r_lebesgue, consts, notes)


def _pencil_count(pm: PencilMatrices, beta: float) -> int:
    return int(np.sum(pm.generalized_eigenvalues < beta * (1 - BOUNDARY_RTOL)))


@dataclass(frozen=True)
class GrowthFit:
    exponent: float
    log_gain: float
    corrected_exponent: float
    points: int
    lower_theory: float
    upper_theory: float

    def __iter__(self):
        yield self.exponent
        yield self.log_gain

    def to_json(self) -> str:
        return json.dumps({"exponent": self.exponent, "log_gain": self.log_gain,
                           "corrected_exponent": self.corrected_exponent, "points": self.points,
                           "lower_theory": self.lower_theory, "upper_theory": self.upper_theory})


def fit_growth(table: ScanTable, column: str = "bs_count") -> GrowthFit:
    """Log-log slope of a count column against ``beta`` over rows with positive counts.

    ``log_gain`` is the residual reduction from the extra regressor
    ``log2((log2 beta)^{(n-1)(g1-1)/g1})``.
    """
    b = table.column("beta")
    c = table.column(column)
    use = c > 0
    if use.sum() < 3:
        raise InsufficientDataError(f"{column}: need >= 3 couplings with positive counts, got {int(use.sum())}")
    x, y = np.log2(b[use]), np.log2(c[use])
    X1 = np.column_stack([np.ones_like(x), x])
    coef1, *_ = np.linalg.lstsq(X1, y, rcond=None)
    rss1 = float(np.sum((y - X1 @ coef1) ** 2))
    g1, n = table.dec.gamma[0], table.dec.n
    expo_log = (n - 1) * (g1 - 1) / g1
    gain, corrected = 0.0, float(coef1[1])
    if expo_log > 0 and np.all(x > 0) and use.sum() >= 4:
        X2 = np.column_stack([X1, expo_log * np.log2(x)])
        coef2, *_ = np.linalg.lstsq(X2, y, rcond=None)
        rss2 = float(np.sum((y - X2 @ coef2) ** 2))
        gain = 0.0 if rss1 <= 1e-24 else max(0.0, 1 - rss2 / rss1)
        corrected = float(coef2[1])
    return GrowthFit(float(coef1[1]), gain, corrected, int(use.sum()),
                     table.dec.m / table.s, table.r_lebesgue / g1)
