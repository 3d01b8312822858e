import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.special import gammaln

from blockrad.errors import InputError, InvarianceWarning, ParameterError
from blockrad.geometry import (
    BlockDecomposition, DyadicCube, ReducedFunction, axis_cube_weight_exact, block_constant,
    block_radii, cube_weight, cube_weight_exact, cube_weight_model, extend, lp_norm_reduced,
    random_block_rotation, read_reduced_csv, reduced_grid, trace, weight_w_gamma,
    write_reduced_csv,
)

gammas = st.lists(st.integers(2, 5), min_size=1, max_size=4)


def gauss(x):
    return np.exp(-np.sum(x ** 2, axis=-1))


class TestDecomposition:
    def test_sorting_and_derived(self):
        dec = BlockDecomposition([4, 2, 2, 3])
        assert dec.gamma == (2, 2, 3, 4)
        assert dec.input_gamma == (4, 2, 2, 3)
        assert (dec.d, dec.m, dec.n) == (11, 4, 2)
        assert dec.alphas == (Fraction(1, 7), Fraction(1, 7), Fraction(2, 7), Fraction(3, 7))

    @pytest.mark.parametrize("bad", [[1, 2], [], [2, 0], [2.5, 2]])
    def test_rejects(self, bad):
        with pytest.raises(InputError):
            BlockDecomposition(bad)

    @given(gammas)
    def test_invariants(self, g):
        dec = BlockDecomposition(g)
        a = dec.alphas
        assert list(dec.gamma) == sorted(g)
        assert sum(a) == 1
        if dec.m > 1:
            assert 0 < a[0] and a[-1] < 1
        assert dec.n >= 1 and dec.gamma[dec.n - 1] == dec.gamma[0]
        if dec.n < dec.m:
            assert dec.gamma[dec.n] > dec.gamma[0]
        assert sorted(dec.input_gamma) == list(dec.gamma)
        assert list(dec.input_gamma) == list(g)

    def test_json_roundtrip(self):
        dec = BlockDecomposition([3, 2])
        assert BlockDecomposition.from_json(dec.to_json()) == dec
        assert BlockDecomposition.from_json('{"gamma":[2,2]}').gamma == (2, 2)

    def test_sorted_layout(self):
        dec = BlockDecomposition([3, 2])
        x = np.array([1.0, 2, 3, 4, 5])
        np.testing.assert_array_equal(dec.to_sorted_layout(x), [4, 5, 1, 2, 3])


class TestRadiiWeights:
    def test_examples(self):
        np.testing.assert_allclose(block_radii([3, 4, 0, 0], BlockDecomposition([2, 2])), [5, 0])
        np.testing.assert_allclose(block_radii([1, 1, 2, 2, 1], BlockDecomposition([2, 3])), [math.sqrt(2), 3])
        np.testing.assert_array_equal(block_radii([0, 0, 0, 0], BlockDecomposition([2, 2])), [0, 0])
        assert weight_w_gamma([2, 5], BlockDecomposition([2, 2])) == 10
        assert weight_w_gamma([1, 1], BlockDecomposition([3, 4])) == 1
        assert weight_w_gamma([-2, 3], BlockDecomposition([2, 3])) == 18

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            block_radii([1, 2, 3], BlockDecomposition([2, 2]))
        with pytest.raises(InputError):
            weight_w_gamma([1, 2, 3], BlockDecomposition([2, 2]))

    @given(gammas, st.data())
    def test_sign_flip_invariance(self, g, data):
        dec = BlockDecomposition(g)
        r = np.array(data.draw(st.lists(st.one_of(st.just(0.0), st.floats(1e-3, 5), st.floats(-5, -1e-3)),
                                         min_size=dec.m, max_size=dec.m)))
        s = np.array(data.draw(st.lists(st.sampled_from([-1, 1]), min_size=dec.m, max_size=dec.m)))
        assert weight_w_gamma(r * s, dec) == weight_w_gamma(r, dec)
        assert (weight_w_gamma(r, dec) == 0) == bool(np.any(r == 0))

    @given(gammas, st.integers(0, 2 ** 31))
    def test_radii_rotation_invariant(self, g, seed):
        dec = BlockDecomposition(g)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=dec.d)
        R = random_block_rotation(dec, rng)
        np.testing.assert_allclose(block_radii(R @ x, dec), block_radii(x, dec), rtol=1e-12)


class TestCubeWeight:
    def test_examples(self):
        dec = BlockDecomposition([2, 2])
        assert cube_weight_exact(DyadicCube(0, (0, 0)), dec) == Fraction(1, 4)
        assert cube_weight_exact(DyadicCube(1, (1, 0)), dec) == Fraction(3, 64)
        assert cube_weight_exact(DyadicCube(0, (-1, 0)), dec) == Fraction(1, 4)
        assert cube_weight(DyadicCube(1, (1, 0)), dec) == 3 / 64

    @pytest.mark.parametrize("g", [2, 3, 4])
    @pytest.mark.parametrize("nu,n", [(0, 0), (0, -3), (2, 5), (3, -1), (1, -7)])
    def test_against_quadrature(self, g, nu, n):
        a, b = n / 2 ** nu, (n + 1) / 2 ** nu
        ref, _ = integrate.quad(lambda r: abs(r) ** (g - 1), a, b, epsabs=0, epsrel=1e-13)
        assert float(axis_cube_weight_exact(nu, n, g)) == pytest.approx(ref, rel=1e-12)

    def test_reflection_symmetry(self):
        for g in (2, 3, 5):
            for n in range(-20, 20):
                assert axis_cube_weight_exact(0, n, g) == axis_cube_weight_exact(0, -n - 1, g)

    @pytest.mark.parametrize("g", [(2, 2), (2, 3), (3, 4)])
    def test_model_equivalence_exhaustive(self, g):
        # the per-axis ratio does not depend on nu, so the exhaustive scan over
        # |n| <= 2^10 for one axis bounds the product for every nu <= 10
        dec = BlockDecomposition(g)
        lows, highs = [], []
        for gi in dec.gamma:
            ratios = [float(axis_cube_weight_exact(0, n, gi)) / max(1, abs(n)) ** (gi - 1)
                      for n in range(-2 ** 10, 2 ** 10 + 1)]
            lows.append(min(ratios))
            highs.append(max(ratios))
        c1, c2 = math.prod(lows), math.prod(highs)
        assert c1 > 0 and c2 < math.inf
        rng = np.random.default_rng(1)
        for nu in range(11):
            for _ in range(40):
                idx = tuple(int(v) for v in rng.integers(-2 ** 10, 2 ** 10 + 1, size=dec.m))
                q = DyadicCube(nu, idx)
                ratio = cube_weight(q, dec) / cube_weight_model(q, dec)
                assert c1 * (1 - 1e-12) <= ratio <= c2 * (1 + 1e-12)

    def test_negative_level(self):
        with pytest.raises(InputError):
            DyadicCube(-1, (0,))


class TestTraceExtend:
    def test_examples(self):
        dec = BlockDecomposition([2, 2])
        g = trace(gauss, dec, grid=((np.array([1.0]), np.array([2.0])), (np.array([1.0]), np.array([1.0]))))
        assert g.values[0, 0] == pytest.approx(math.exp(-5))
        one = lambda r: np.ones(np.shape(r)[:-1])
        assert extend(one, np.array([0.3, 1, 2, -4]), dec) == 1

    def test_round_trip_quadratic(self):
        dec = BlockDecomposition([2, 3])
        sq = lambda x: np.sum(x ** 2, axis=-1)
        grid = ((np.array([0.5, 1.0]), np.array([0.5, 1.0])), (np.array([1, 1.0]), np.array([1, 1.0])))
        g = trace(sq, dec, grid=grid)
        assert g.values[1, 1] == 2
        assert extend(g, np.array([0.0, 1, 1, 0, 0])) == pytest.approx(2)

    @given(st.sampled_from([(2, 2), (2, 3), (3, 3), (4, 2)]), st.integers(0, 2 ** 31))
    @settings(max_examples=20, deadline=None)
    def test_extend_trace_identity(self, gam, seed):
        dec = BlockDecomposition(gam)
        f = lambda x: np.exp(-np.sum(x ** 2, -1)) * (1 + block_radii(x, dec)[..., 0])
        g = trace(f, dec, T=3.0, panels=2, order=5)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(30, dec.d))
        # rotate grid points into generic positions of R^d and extend back
        pts = g.points().reshape(-1, dec.m)
        from blockrad.geometry import embed_radii
        xs = embed_radii(pts, dec) @ random_block_rotation(dec, rng).T
        np.testing.assert_allclose(extend(g, xs), g.values.ravel(), rtol=1e-12, atol=1e-14)
        # trace of the extension reproduces the samples
        g2 = trace(lambda y: extend(g, y), dec, grid=(g.grid, g.quadrature_weights))
        np.testing.assert_allclose(g2.values, g.values, rtol=1e-12, atol=1e-15)
        assert np.all(np.isfinite(f(x)))

    def test_audit_warns_on_non_invariant(self):
        dec = BlockDecomposition([2, 2])
        bad = lambda x: np.exp(-np.sum(x ** 2, -1)) * (1 + x[..., 0])
        with pytest.warns(InvarianceWarning):
            trace(bad, dec, T=3.0, panels=2, order=4, audit=True)

    def test_audit_silent_on_invariant(self, recwarn):
        trace(gauss, BlockDecomposition([2, 3]), T=3.0, panels=2, order=4, audit=True)
        assert not [w for w in recwarn if issubclass(w.category, InvarianceWarning)]


def ball_poly_integral(g, k):
    """int over R^g of (1 - |y|^2)_+^k."""
    return math.exp(0.5 * g * math.log(math.pi) + gammaln(k + 1) - gammaln(k + 1 + g / 2))


class TestLpNorm:
    @pytest.mark.parametrize("gam", [(2, 2), (2, 3), (3, 3), (2, 2, 2)])
    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_gaussian_oracle(self, gam, p):
        dec = BlockDecomposition(gam)
        g = trace(gauss, dec)
        # int exp(-p|x|^2) over R^d
        exact = (math.pi / p) ** (dec.d / 2)
        assert lp_norm_reduced(g, p) ** p == pytest.approx(exact, rel=1e-10)

    def test_examples(self):
        dec = BlockDecomposition([2, 2])
        assert lp_norm_reduced(trace(gauss, dec), 1) == pytest.approx(math.pi ** 2, rel=1e-12)
        zero = trace(lambda x: np.zeros(len(x)), dec, T=2.0, panels=1, order=4)
        assert lp_norm_reduced(zero, 1) == 0 and lp_norm_reduced(zero, math.inf) == 0
        g33 = trace(gauss, BlockDecomposition([3, 3]))
        assert lp_norm_reduced(g33, 2) == pytest.approx((math.pi / 2) ** 1.5, rel=1e-12)

    def test_constant_is_product_of_spheres(self):
        dec = BlockDecomposition([2, 2])
        assert block_constant(dec) == pytest.approx(4 * math.pi ** 2)

    def test_rejects_small_p(self):
        g = trace(gauss, BlockDecomposition([2, 2]), T=2.0, panels=1, order=4)
        with pytest.raises(ParameterError):
            lp_norm_reduced(g, 0.5)

    @pytest.mark.parametrize("gam", [(2, 2), (2, 3), (3, 3)])
    @pytest.mark.parametrize("p", [1, 2])
    def test_compact_support_oracle(self, gam, p):
        dec = BlockDecomposition(gam)
        k = 4
        f = lambda x: np.prod(np.clip(1 - block_radii(x, dec) ** 2, 0, None) ** k, axis=-1)
        g = trace(f, dec, T=1.0, panels=2, order=12)
        exact = math.prod(ball_poly_integral(gi, k * p) for gi in dec.gamma)
        assert lp_norm_reduced(g, p) ** p == pytest.approx(exact, rel=1e-12)

    @pytest.mark.parametrize("gam", [(2, 2), (2, 3), (3, 3)])
    def test_cartesian_tensor_oracle(self, gam):
        # Gauss-Hermite in all d Cartesian coordinates, exact for polynomial x Gaussian
        dec = BlockDecomposition(gam)
        f = lambda x: np.exp(-0.5 * np.sum(x ** 2, -1)) * (1 + block_radii(x, dec)[..., 0] ** 2
                                                        * block_radii(x, dec)[..., -1] ** 2)
        g = trace(f, dec)
        xh, wh = np.polynomial.hermite.hermgauss(8)
        mesh = np.stack(np.meshgrid(*([xh] * dec.d), indexing="ij"), -1).reshape(-1, dec.d)
        w = np.prod(np.stack(np.meshgrid(*([wh] * dec.d), indexing="ij"), -1).reshape(-1, dec.d), -1)
        # integrand |f|^2 = exp(-|x|^2) (1 + r1^2 rm^2)^2
        poly = (1 + block_radii(mesh, dec)[:, 0] ** 2 * block_radii(mesh, dec)[:, -1] ** 2) ** 2
        ref = float(np.sum(w * poly))
        assert lp_norm_reduced(g, 2) ** 2 == pytest.approx(ref, rel=1e-6)

    def test_monte_carlo_oracle(self):
        dec = BlockDecomposition([2, 3])
        f = lambda x: np.exp(-np.sum(x ** 2, -1)) * (1 + block_radii(x, dec)[..., 0] ** 2)
        g = trace(f, dec)
        rng = np.random.default_rng(7)
        n = 4_000_000
        x = rng.normal(scale=math.sqrt(0.5), size=(n, dec.d))
        # density of N(0, I/2) is pi^{-d/2} exp(-|x|^2)
        est = math.pi ** (dec.d / 2) * float(np.mean(1 + np.sum(x[:, :2] ** 2, -1)))
        assert lp_norm_reduced(g, 1) == pytest.approx(est, rel=1e-3)


class TestSerialization:
    def test_csv_roundtrip(self):
        dec = BlockDecomposition([3, 2])
        g = trace(gauss, dec, T=2.0, panels=1, order=3)
        text = write_reduced_csv(g)
        assert text.splitlines()[0] == "axis_counts,gamma"
        h = read_reduced_csv(text, g.quadrature_weights)
        np.testing.assert_array_equal(h.values, g.values)
        for a, b in zip(h.grid, g.grid):
            np.testing.assert_array_equal(a, b)
        assert read_reduced_csv(text).decomposition == dec

    def test_bad_csv(self):
        with pytest.raises(InputError):
            read_reduced_csv("a,b\n1,2\n")

    def test_reduced_function_validation(self):
        dec = BlockDecomposition([2, 2])
        nodes, w = reduced_grid(dec, 2.0, 1, 3)
        with pytest.raises(InputError):
            ReducedFunction(dec, nodes, np.zeros((3, 2)), w)
        with pytest.raises(InputError):
            ReducedFunction(dec, nodes, np.zeros((3, 3)), (w[0], -w[1]))
