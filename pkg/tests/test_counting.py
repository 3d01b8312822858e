import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from blockrad.counting import (
    ShellCensus, census, enumerate_tau, f_ell, fit_shell_exponent, hyperbolic_volume_bounds,
    lower_bound_threshold, orbit_count, shell_count, volume_bounds, volume_equal_alpha,
    volume_monte_carlo, volume_VmR,
)
from blockrad.errors import InputError, InsufficientDataError, ParameterError, ResourceError
from blockrad.geometry import BlockDecomposition, cube_weight_exact


def brute_shell(L, gam, mode):
    """Direct enumeration over a box with exact rational exponents."""
    dec = BlockDecomposition(gam)
    D = dec.d - dec.m
    lo, hi = 2 ** (L * D), 2 ** ((L + 1) * D)
    box = int(2 ** ((L + 1) / float(dec.alphas[0]))) + 2
    rng = {"tilde": range(1, box + 1), "n0": range(0, box + 1), "z": range(-box, box + 1)}[mode]
    count = 0
    for k in itertools.product(rng, repeat=dec.m):
        p = math.prod(max(1, abs(ki)) ** (g - 1) for ki, g in zip(k, dec.gamma))
        count += lo <= p < hi
    return count


def divisor_count(N):
    return sum(1 for q in range(1, N + 1) if N % q == 0)


class TestShellCount:
    def test_divisor_sum_example(self):
        dec = BlockDecomposition([2, 2])
        assert shell_count(1, dec, "tilde") == sum(divisor_count(N) for N in range(4, 16)) == 40

    def test_level_zero_example(self):
        assert shell_count(0, BlockDecomposition([2, 2]), "tilde") == 5

    @pytest.mark.parametrize("gam", [(2, 2), (2, 3), (3, 2), (2, 2, 2), (3, 4)])
    @pytest.mark.parametrize("mode", ["tilde", "n0", "z"])
    def test_brute_force(self, gam, mode):
        levels = range(0, 3) if len(gam) == 2 else range(0, 2)
        for L in levels:
            assert shell_count(L, BlockDecomposition(gam), mode) == brute_shell(L, gam, mode)

    @pytest.mark.parametrize("gam", [(2, 2), (2, 3)])
    def test_cumulative_matches_direct_count(self, gam):
        # direct count of {k in Z^2 : prod max(1,|k_i|)^(g_i-1) < B} by summing over k_2
        dec = BlockDecomposition(gam)
        e1, e2 = (g - 1 for g in dec.gamma)
        D = dec.d - dec.m
        for L0 in (6, 10):
            B = 2 ** ((L0 + 1) * D)
            v2 = np.arange(1, int(round(B ** (1 / e2))) + 2, dtype=np.int64)
            v2 = v2[v2 ** e2 < B]
            m2 = np.where(v2 == 1, 3, 2)
            # number of v1 >= 1 with v1^e1 < B / v2^e2, then lattice multiplicity 3 + 2 (n - 1)
            lim = (B - 1) // v2 ** e2
            n1 = np.floor(lim.astype(float) ** (1 / e1)).astype(np.int64)
            n1 = np.where((n1 + 1) ** e1 <= lim, n1 + 1, n1)
            n1 = np.where(n1 ** e1 > lim, n1 - 1, n1)
            direct = int(np.sum(m2 * (3 + 2 * (n1 - 1))))
            total = sum(shell_count(L, dec, "z") for L in range(L0 + 1))
            assert total == direct

    @pytest.mark.parametrize("gam", [(2, 2), (2, 3), (2, 2, 3)])
    def test_lattice_sandwich(self, gam):
        dec = BlockDecomposition(gam)
        for L in range(0, 6):
            t, n0, z = (shell_count(L, dec, m) for m in ("tilde", "n0", "z"))
            assert t <= n0 <= z <= 2 ** dec.m * n0

    def test_budget(self):
        with pytest.raises(ResourceError, match="feasible levels: 0\\.\\."):
            shell_count(12, BlockDecomposition([2, 2]), budget=1000)

    def test_bad_inputs(self):
        with pytest.raises(InputError):
            shell_count(-1, BlockDecomposition([2, 2]))
        with pytest.raises(InputError):
            shell_count(1, BlockDecomposition([2, 2]), mode="q")

    def test_threads_do_not_change_counts(self):
        dec = BlockDecomposition([2, 2])
        assert shell_count(10, dec, threads=1) == shell_count(10, dec, threads=4)


class TestCensusFit:
    def test_census_csv(self):
        c = census(BlockDecomposition([2, 3]), range(0, 4))
        text = c.to_csv()
        assert text.splitlines()[0] == "L,count,mode,gamma"
        assert len(text.splitlines()) == 5
        back = ShellCensus.from_csv(text)
        assert back.counts == c.counts and back.levels == c.levels

    def test_slope_n1(self):
        fit = fit_shell_exponent(census(BlockDecomposition([2, 3]), range(3, 12)))
        assert fit.slope == pytest.approx(3, rel=0.05)
        assert fit.log_gain == 0
        assert fit.theoretical == 3

    def test_slope_n2(self):
        fit = fit_shell_exponent(census(BlockDecomposition([2, 2]), range(3, 12)))
        assert fit.corrected_slope == pytest.approx(2, rel=0.05)
        assert fit.log_gain > 0.3
        slope, gain = fit
        assert slope == fit.slope and gain == fit.log_gain

    def test_constant_census(self):
        c = ShellCensus(BlockDecomposition([2, 2]), [1, 2, 3, 4, 5], [7] * 5)
        fit = fit_shell_exponent(c)
        assert fit.slope == pytest.approx(0, abs=1e-12)

    def test_insufficient(self):
        c = ShellCensus(BlockDecomposition([2, 2]), [1, 2, 3], [1, 2, 4])
        with pytest.raises(InsufficientDataError):
            fit_shell_exponent(c)

    def test_cumulative(self):
        fit = fit_shell_exponent(census(BlockDecomposition([2, 3]), range(3, 12)), cumulative=True)
        assert fit.cumulative and fit.slope == pytest.approx(3, rel=0.05)


class TestOrbit:
    def test_examples(self):
        assert orbit_count(0, (3, 4), BlockDecomposition([2, 2])) == 12
        assert orbit_count(3, (0, 0), BlockDecomposition([3, 5])) == 1
        assert orbit_count(1, (2, 0), BlockDecomposition([2, 3])) == 2

    def test_negative(self):
        with pytest.raises(InputError):
            orbit_count(0, (-1, 2), BlockDecomposition([2, 2]))


class TestVolume:
    def test_f_ell(self):
        assert f_ell(1, 7) == 7
        assert f_ell(2, 4) == pytest.approx(4 * math.log(4))
        assert f_ell(3, math.e ** 2) == pytest.approx(2 * math.e ** 2)
        with pytest.raises(ParameterError):
            f_ell(2, 1.0)

    def test_m2_example(self):
        v = volume_VmR(2.0, [0.5, 0.5])
        assert v == pytest.approx(4 * math.log(4) - 3, rel=1e-8)
        lo, hi = hyperbolic_volume_bounds(2, 4.0)
        assert lo <= v <= hi
        assert (lo, hi) == pytest.approx((f_ell(2, 4) - f_ell(1, 4), f_ell(2, 4)))

    @pytest.mark.parametrize("a1", [0.25, 0.5, 1.0])
    def test_m1(self, a1):
        assert volume_VmR(2.0, [a1]) == pytest.approx(2 ** (1 / a1) - 1, rel=1e-12)

    @pytest.mark.parametrize("m,a", [(2, 0.5), (3, 1 / 3), (3, 0.2)])
    @pytest.mark.parametrize("R", [1.5, 4.0, 2.0 ** 10])
    def test_equal_alpha_closed_form(self, m, a, R):
        assert volume_VmR(R, [a] * m) == pytest.approx(volume_equal_alpha(R, m, a), rel=1e-7)

    @pytest.mark.parametrize("R", [2.0, 16.0, 2.0 ** 12])
    def test_two_exponent_closed_form(self, R):
        # alpha = (1/3, 2/3): integral of (R^3 x^-2 - 1) over [1, R^{3/2}]
        assert volume_VmR(R, [1 / 3, 2 / 3]) == pytest.approx(R ** 3 - 2 * R ** 1.5 + 1, rel=1e-7)

    @pytest.mark.parametrize("R", [3.0, 50.0])
    def test_mixed_m3_against_quad(self, R):
        a = [0.2, 0.4, 0.4]
        # outer coordinate with alpha 0.2 over the closed-form equal-alpha pair
        # x = e^u keeps QUADPACK away from the huge linear range
        inner = lambda u: volume_equal_alpha(R * math.exp(-0.2 * u), 2, 0.4) * math.exp(u)
        ref, _ = integrate.quad(inner, 0, 5 * math.log(R), epsrel=1e-12, limit=500)
        assert volume_VmR(R, a) == pytest.approx(ref, rel=1e-7)

    @pytest.mark.parametrize("a", [[0.5, 0.5], [1 / 3, 2 / 3], [1 / 3] * 3, [0.2, 0.4, 0.4],
                                   [0.25, 0.25, 0.5], [1 / 7, 2 / 7, 4 / 7]])
    def test_sandwich(self, a):
        thr = lower_bound_threshold(a)
        for j in range(1, 17):
            R = 2.0 ** j
            v = volume_VmR(R, a)
            b = volume_bounds(R, a)
            assert v <= b.upper * (1 + 1e-7)
            if R >= thr:
                assert v >= b.lower

    @pytest.mark.parametrize("a", [[1 / 3, 2 / 3], [1 / 3] * 3, [0.25, 0.25, 0.5]])
    def test_monte_carlo(self, a):
        for R in (4.0, 2.0 ** 16):
            est, se = volume_monte_carlo(R, a, 200_000, seed=3)
            v = volume_VmR(R, a)
            assert abs(est - v) <= 4 * se + 1e-12 * v
            assert abs(est / v - 1) < 0.02

    def test_rejects(self):
        with pytest.raises(ParameterError):
            volume_VmR(1.0, [0.5, 0.5])


def brute_tau(gam, length, box=12):
    dec = BlockDecomposition(gam)
    pts = itertools.product(range(-box, box), repeat=dec.m)
    from blockrad.geometry import DyadicCube
    items = sorted((cube_weight_exact(DyadicCube(0, k), dec), k) for k in pts)
    return items[:length]


class TestTau:
    def test_examples(self):
        seq = enumerate_tau(BlockDecomposition([2, 2]), 8)
        assert [seq.exact(i) for i in range(4)] == [Fraction(1, 4)] * 4
        assert {tuple(k) for k in seq.index_map[:4]} == {(0, 0), (0, -1), (-1, 0), (-1, -1)}
        assert seq.exact(4) == Fraction(3, 4)

    @pytest.mark.parametrize("gam", [(2, 2), (2, 3), (3, 3), (2, 2, 2)])
    def test_brute_force(self, gam):
        box = 12 if len(gam) == 2 else 6
        ref = brute_tau(gam, 60, box)
        seq = enumerate_tau(BlockDecomposition(gam), 60)
        assert [seq.exact(i) for i in range(60)] == [w for w, _ in ref]
        assert [tuple(int(v) for v in k) for k in seq.index_map] == [k for _, k in ref]

    @given(st.sampled_from([(2, 2), (2, 3), (4, 3), (2, 2, 2)]), st.integers(1, 3000))
    @settings(max_examples=25, deadline=None)
    def test_monotone_and_exact(self, gam, length):
        dec = BlockDecomposition(gam)
        seq = enumerate_tau(dec, length)
        assert len(seq.values) == length
        assert np.all(np.diff(seq.values) >= 0)
        for i in {0, length // 2, length - 1}:
            assert cube_weight_exact(seq.cube(i), dec) == seq.exact(i)

    def test_rejects(self):
        with pytest.raises(InputError):
            enumerate_tau(BlockDecomposition([2, 2]), 0)
