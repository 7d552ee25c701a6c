import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from starscat.potentials import Potential
from starscat.unperturbed import (RayParameters, SeriesTruncation, TruncationError,
                                  b_unperturbed, branch_power, eval_C, eval_C_auto,
                                  eval_C_grid, green_kernel, jost_unperturbed,
                                  jost_unperturbed_grid, series_coefficients,
                                  stokes_constants, weyl_unperturbed)


class TestBranchPower:
    def test_one_to_any_power(self):
        assert branch_power(1.0, 0.3 - 2.7j) == 1.0

    def test_negative_one_sqrt_uses_upper_branch(self):
        assert abs(branch_power(-1.0, 0.5) - 1j) < 1e-15

    def test_defining_formula(self):
        # direct evaluation of exp(mu (log|z| + i arg z)) at z = 2i
        mu = 0.25 - 0.1j
        expected = cmath.exp(mu * (math.log(2.0) + 1j * math.pi / 2))
        assert abs(branch_power(2j, mu) - expected) < 1e-15

    def test_zero_with_positive_real_part(self):
        assert branch_power(0.0, 1.5 + 1j) == 0

    def test_zero_rejected_otherwise(self):
        with pytest.raises(ValueError):
            branch_power(0.0, -0.5)

    @given(st.floats(0.1, 10), st.floats(-3, 3), st.floats(-2, 2))
    @settings(max_examples=40, deadline=None)
    def test_multiplicative_in_exponent(self, r, angle, a):
        # z^(a+b) = z^a z^b on one fixed branch
        z = r * cmath.exp(1j * angle * 0.99)
        b = 1.3 - 0.2
        lhs = branch_power(z, a + b)
        rhs = branch_power(z, a) * branch_power(z, b)
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))

    def test_array_input_matches_scalar(self):
        z = np.array([2j, -1.0 + 0j, 0.3 - 0.4j])
        out = branch_power(z, 0.3 + 0.1j)
        for zi, oi in zip(z, out):
            assert abs(oi - branch_power(complex(zi), 0.3 + 0.1j)) < 1e-15


class TestRayParameters:
    def test_derived_exponents(self):
        ray = RayParameters(0.75)
        assert ray.mu1 + ray.mu2 == 1.0
        assert abs((ray.mu2 - ray.mu1) - 2 * 0.75) < 1e-15
        assert abs(ray.nu0 - (0.75 ** 2 - 0.25)) < 1e-15

    @pytest.mark.parametrize("nu", [0.5, 0.3, 1.0, 2.0, 3.0 + 1e-12j])
    def test_rejects_excluded_orders(self, nu):
        with pytest.raises(ValueError):
            RayParameters(nu)

    def test_rejects_zero_sigma(self):
        with pytest.raises(ValueError):
            RayParameters(0.75, sigma=0.0)
        with pytest.raises(ValueError):
            RayParameters(0.75, sigma2=0.0)

    def test_complex_order_accepted(self):
        RayParameters(0.6 + 0.1j)


class TestSeriesCoefficients:
    def test_normalization_product(self):
        for nu in (0.75, 0.6 + 0.1j, 1.4):
            ray = RayParameters(nu)
            c1 = series_coefficients(ray, 1, 0)
            c2 = series_coefficients(ray, 2, 0)
            assert abs(c1[0] * c2[0] - 1.0 / (2 * complex(nu))) < 1e-15

    def test_hand_value_first_coefficient(self):
        # nu = 3/4: (2 + mu1)(1 + mu1) - nu0 = 1.75 * 0.75 - 0.3125 = 1
        ray = RayParameters(0.75)
        c = series_coefficients(ray, 1, 1)
        assert abs(c[1] - (-1.0)) < 1e-15

    def test_incremental_recurrence_oracle(self):
        nu = 0.6 + 0.1j
        ray = RayParameters(nu)
        got = series_coefficients(ray, 2, 5)
        mu = 0.5 + nu
        nu0 = nu * nu - 0.25
        c = 1.0 / (2 * nu)
        expect = [c]
        for s in range(1, 6):
            c = -c / ((2 * s + mu) * (2 * s + mu - 1) - nu0)
            expect.append(c)
        assert np.allclose(got, expect, rtol=1e-14, atol=0)

    def test_near_integer_order_raises(self):
        ray = RayParameters(1.0 + 1e-8)
        from starscat.unperturbed import NearIntegerOrderError
        with pytest.raises(NearIntegerOrderError):
            series_coefficients(ray, 1, 3)


class TestEvalC:
    def test_lambda_zero_leading_term(self):
        ray = RayParameters(0.8)
        for j in (1, 2):
            c0 = series_coefficients(ray, j, 0)[0]
            mu = ray.mu(j)
            val, der = eval_C(ray, j, 0.7, 0.0)
            assert abs(val - c0 * 0.7 ** mu) < 1e-14 * abs(val)
            assert abs(der - mu * c0 * 0.7 ** (mu - 1)) < 1e-14 * abs(der)

    @pytest.mark.parametrize("x", [0.1, 1.0, 3.0])
    @pytest.mark.parametrize("lam", [0, 1 + 1j, -4])
    def test_wronskian_normalization(self, x, lam):
        ray = RayParameters(0.75)
        c1, d1 = eval_C(ray, 1, x, lam)
        c2, d2 = eval_C(ray, 2, x, lam)
        scale = max(1.0, abs(c1 * d2), abs(d1 * c2))
        assert abs(c1 * d2 - d1 * c2 - 1) < 1e-11 * scale

    def test_bessel_proportionality(self):
        # C_j(x, rho^2) is proportional to sqrt(x) J_{-+nu}(rho x); the
        # constant follows from matching the leading power
        from scipy.special import gamma, jv
        nu, rho, x = 0.75, 2.0, 1.0
        ray = RayParameters(nu)
        c1, _ = eval_C(ray, 1, x, rho ** 2)
        c2, _ = eval_C(ray, 2, x, rho ** 2)
        ref1 = gamma(1 - nu) * 2.0 ** (-nu) * rho ** (-(0.5 - nu)) * \
            math.sqrt(rho * x) * jv(-nu, rho * x)
        ref2 = gamma(nu) * 2.0 ** (nu - 1) * rho ** (-(0.5 + nu)) * \
            math.sqrt(rho * x) * jv(nu, rho * x)
        assert abs(c1 - ref1) < 1e-12 * abs(ref1)
        assert abs(c2 - ref2) < 1e-12 * abs(ref2)

    def test_scaling_collapses_to_one_variable(self):
        # rho^{mu_j} C_j(x, rho^2) depends on rho x only
        ray = RayParameters(0.65)
        for j in (1, 2):
            a, _ = eval_C(ray, j, 0.5, 4.0)     # rho = 2, rho x = 1
            b, _ = eval_C(ray, j, 1.0, 1.0)     # rho = 1, rho x = 1
            mu = ray.mu(j)
            assert abs(a * 2.0 ** mu - b) < 1e-12 * abs(b)

    def test_entire_in_lambda(self):
        # finite-difference Cauchy-Riemann residual in lambda
        ray = RayParameters(0.7 + 0.05j)
        h = 1e-5
        for lam in (0.5, -1.2 + 0.8j, 2j):
            vals = {}
            for dlam in (h, -h, 1j * h, -1j * h):
                vals[dlam], _ = eval_C(ray, 1, 0.9, lam + dlam)
            d_re = (vals[h] - vals[-h]) / (2 * h)
            d_im = (vals[1j * h] - vals[-1j * h]) / (2 * h)
            assert abs(d_re + 1j * d_im - 2 * d_re) < 1e-6 * max(1, abs(d_re))

    def test_truncation_error_carries_magnitude(self):
        ray = RayParameters(0.75)
        with pytest.raises(TruncationError) as err:
            eval_C(ray, 1, 40.0, 25.0, SeriesTruncation(max_terms=10, tail_tolerance=1e-12))
        assert err.value.last_term > 0

    def test_stops_on_max_terms_or_tolerance(self):
        ray = RayParameters(0.75)
        # loose tolerance stops the series early but still returns
        val_loose, _ = eval_C(ray, 1, 1.0, 1.0, SeriesTruncation(60, 1e-4))
        val_tight, _ = eval_C(ray, 1, 1.0, 1.0, SeriesTruncation(60, 1e-14))
        assert abs(val_loose - val_tight) < 1e-3
        assert abs(val_loose - val_tight) > 0

    def test_grid_evaluator_matches_scalar(self):
        ray = RayParameters(0.75)
        lams = np.array([0.5, -2.0, 3 + 1j, 400.0, -900.0], dtype=complex)
        c1, d1, c2, d2 = eval_C_grid(ray, 1.3, lams)
        for i, lam in enumerate(lams):
            a, b = eval_C_auto(ray, 1, 1.3, complex(lam))
            assert abs(c1[i] - a) < 1e-10 * max(1, abs(a))
            assert abs(d1[i] - b) < 1e-10 * max(1, abs(b))


class TestGreenKernel:
    def test_coincident_points_vanish(self):
        ray = RayParameters(0.75)
        assert green_kernel(ray, 1.3, 1.3, 2 + 1j) == 0

    def test_antisymmetry(self):
        ray = RayParameters(0.9)
        g1 = green_kernel(ray, 0.7, 1.5, 1 - 2j)
        g2 = green_kernel(ray, 1.5, 0.7, 1 - 2j)
        assert abs(g1 + g2) < 1e-14 * max(1, abs(g1))

    def test_lambda_zero_closed_form(self):
        nu = 0.75
        ray = RayParameters(nu)
        x, t = 0.6, 1.7
        g = green_kernel(ray, x, t, 0.0)
        expect = (x ** (0.5 - nu) * t ** (0.5 + nu)
                  - x ** (0.5 + nu) * t ** (0.5 - nu)) / (2 * nu)
        assert abs(g - expect) < 1e-14


class TestUnperturbedJost:
    def test_matches_hankel_form(self):
        from scipy.special import hankel1
        nu, rho = 0.75, 1 + 0.5j
        ray = RayParameters(nu)
        for x in (0.5, 1.8):
            f, _ = jost_unperturbed(ray, x, rho)
            pref = cmath.sqrt(math.pi / 2) * cmath.exp(1j * (nu * math.pi / 2 + math.pi / 4))
            ref = pref * branch_power(rho, 0.5) * math.sqrt(x) * hankel1(nu, rho * x)
            assert abs(f - ref) < 1e-10 * abs(ref)

    def test_outgoing_normalization_at_infinity(self):
        ray = RayParameters(0.75)
        rho = 2.7
        x = 3000.0
        f, fp = jost_unperturbed(ray, x, rho)
        assert abs(f * cmath.exp(-1j * rho * x) - 1) < 1e-3
        assert abs(fp / f - 1j * rho) < 1e-3

    def test_expansion_in_series_solutions(self):
        # f0 = b1 C1 + b2 C2 with the closed-form multipliers
        for nu in (0.75, 0.6 + 0.1j):
            ray = RayParameters(nu)
            for rho in (0.5, 2.0, 1 + 1j, -1.7 + 0j):
                rho = complex(rho)
                f, _ = jost_unperturbed(ray, 0.9, rho)
                b1, b2 = b_unperturbed(ray, rho)
                c1, _ = eval_C(ray, 1, 0.9, rho * rho)
                c2, _ = eval_C(ray, 2, 0.9, rho * rho)
                assert abs(f - (b1 * c1 + b2 * c2)) < 1e-10 * abs(f)

    def test_ode_residual(self):
        ray = RayParameters(0.75)
        rho, h = 2.7, 1e-4
        for x0 in (0.8, 2.0):
            xs = np.array([x0 - h, x0, x0 + h])
            f, _ = jost_unperturbed(ray, xs, rho)
            fpp = (f[0] - 2 * f[1] + f[2]) / h ** 2
            res = -fpp + (ray.nu0 / x0 ** 2) * f[1] - rho ** 2 * f[1]
            assert abs(res) < 1e-5 * abs(f[1])

    def test_grid_evaluator_matches_scalar(self):
        ray = RayParameters(0.75)
        rhos = np.array([0.3, -5.0, 20.0, 1 + 2j], dtype=complex)
        f, fp = jost_unperturbed_grid(ray, 1.4, rhos)
        for i, r in enumerate(rhos):
            a, b = jost_unperturbed(ray, 1.4, complex(r))
            assert abs(f[i] - a) < 1e-9 * max(abs(a), 1e-12)
            assert abs(fp[i] - b) < 1e-9 * max(abs(b), 1e-12)

    def test_weyl_quotient(self):
        ray = RayParameters(0.8)
        rho = complex(1.7)
        b1, b2 = b_unperturbed(ray, rho)
        assert abs(weyl_unperturbed(ray, rho) - b2 / b1) < 1e-15 * abs(b2 / b1)

    def test_multiplier_constants_nonzero(self):
        for nu in (0.55, 0.75, 1.3, 0.6 + 0.1j):
            B1, B2 = stokes_constants(RayParameters(nu))
            assert abs(B1) > 1e-6 and abs(B2) > 1e-6
