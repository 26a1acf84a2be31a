import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vapo import homotopy as H
from vapo.verify import bayes_quadrature

UNIT = H.HomotopyParams(omega=1.0, sigma=1.0, eps_sharp=1e-4, dim=1)
GRID = np.linspace(-10.0, 10.0, 100_001)


def test_params_validation():
    with pytest.raises(ValueError):
        H.HomotopyParams(omega=0.0)
    with pytest.raises(ValueError):
        H.HomotopyParams(sigma=-1.0)
    with pytest.raises(ValueError):
        H.HomotopyParams(eps_sharp=1.0)
    with pytest.raises(ValueError):
        H.HomotopyParams(dim=0)


class TestCondStats:
    def test_prior_endpoint(self):
        s = H.cond_stats(UNIT, [2.0], 0.0)
        assert s.mean[0] == 0.0
        assert s.var == 1.0

    @pytest.mark.parametrize("sigma,xbar,t", [(1.0, 2.0, 1.0), (0.01, 1.0, 1.0), (0.3, -1.5, 0.25)])
    def test_matches_bayes_quadrature(self, sigma, xbar, t):
        p = H.HomotopyParams(omega=1.0, sigma=sigma, eps_sharp=1e-4, dim=1)
        _, mean, var = bayes_quadrature(p, xbar, t, GRID)
        s = H.cond_stats(p, [xbar], t)
        assert s.mean[0] == pytest.approx(mean, abs=1e-6)
        assert s.var == pytest.approx(var, abs=1e-6)

    def test_frozen_values(self):
        s = H.cond_stats(UNIT, [2.0], 1.0)
        assert s.mean[0] == pytest.approx(1.0)
        assert s.var == pytest.approx(0.5)
        p = H.HomotopyParams(omega=1.0, sigma=0.01, eps_sharp=1e-4, dim=1)
        s = H.cond_stats(p, [1.0], 1.0)
        assert s.var == pytest.approx(1.0 / (1.0 + 1e4), rel=1e-12)
        assert s.mean[0] == pytest.approx(0.99990001, abs=1e-8)

    @pytest.mark.parametrize("t", [-0.1, 1.5, float("nan")])
    def test_time_out_of_range(self, t):
        with pytest.raises(ValueError):
            H.cond_stats(UNIT, [0.0], t)

    def test_batched(self):
        p = H.HomotopyParams(omega=1.0, sigma=0.5, dim=2)
        xbar = np.array([[1.0, 2.0], [3.0, -1.0]])
        t = np.array([0.2, 0.9])
        s = H.cond_stats(p, xbar, t)
        for i in range(2):
            si = H.cond_stats(p, xbar[i], t[i])
            np.testing.assert_allclose(s.mean[i], si.mean)
            assert s.var[i] == pytest.approx(si.var)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 3), st.floats(0.01, 3))
    def test_monotone_contraction(self, t1, t2, omega, sigma):
        p = H.HomotopyParams(omega=omega, sigma=sigma, dim=1)
        lo, hi = sorted((t1, t2))
        assert H.cond_var(p, hi) <= H.cond_var(p, lo)


class TestSampleCond:
    def test_zero_noise_gives_mean(self):
        p = H.HomotopyParams(omega=1.0, sigma=0.3, dim=3)
        xbar = np.array([1.0, -2.0, 0.5])
        np.testing.assert_array_equal(H.sample_cond(p, xbar, 0.4, np.zeros(3)),
                                      H.cond_stats(p, xbar, 0.4).mean)

    def test_prior_returns_noise(self):
        noise = np.array([0.3, -1.2])
        out = H.sample_cond(H.HomotopyParams(omega=1.0, dim=2), np.array([5.0, 5.0]), 0.0, noise)
        np.testing.assert_array_equal(out, noise)

    def test_value(self):
        assert H.sample_cond(UNIT, [2.0], 1.0, [1.0])[0] == pytest.approx(1.0 + math.sqrt(0.5))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            H.sample_cond(UNIT, [2.0], 1.0, [1.0, 2.0])


class TestInnovation:
    def test_zero_at_datum(self):
        x = np.array([0.3, 0.7])
        assert H.innovation(H.HomotopyParams(dim=2), x, x) == 0.0

    def test_values(self):
        p = H.HomotopyParams(sigma=1.0, dim=2)
        assert H.innovation(p, np.array([1.0, 2.0]), np.zeros(2)) == pytest.approx(5.0)
        p = H.HomotopyParams(sigma=0.1, dim=5)
        x = np.zeros(5)
        x[0] = 0.1
        assert H.innovation(p, x, np.zeros(5)) == pytest.approx(1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            H.innovation(UNIT, np.zeros(2), np.zeros(3))


class TestInnovationCondMean:
    def test_prior(self):
        assert H.innovation_cond_mean(UNIT, [0.0], 0.0) == pytest.approx(1.0)

    @pytest.mark.parametrize("xbar,expected", [([2.0], 1.5), ([2.0, 2.0], 3.0)])
    def test_monte_carlo(self, xbar, expected):
        xbar = np.array(xbar)
        p = H.HomotopyParams(omega=1.0, sigma=1.0, dim=len(xbar))
        rng = np.random.default_rng(0)
        n = 1_000_000
        noise = rng.standard_normal((n, len(xbar)))
        x = H.sample_cond(p, np.tile(xbar, (n, 1)), np.ones(n), noise)
        g = H.innovation(p, x, np.tile(xbar, (n, 1)))
        assert abs(g.mean() - expected) < 3 * g.std() / math.sqrt(n)
        assert H.innovation_cond_mean(p, xbar, 1.0) == pytest.approx(expected)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-5, 5), st.floats(0, 1), st.floats(0.01, 2))
    def test_lower_bound(self, xbar, t, sigma):
        p = H.HomotopyParams(omega=1.0, sigma=sigma, dim=1)
        assert H.innovation_cond_mean(p, [xbar], t) >= H.cond_var(p, t) / sigma**2 * (1 - 1e-12)


class TestSampleTime:
    def test_endpoints(self):
        p = H.HomotopyParams(eps_sharp=1e-4)
        assert H.sample_time(p, 0.0) == 0.0
        assert H.sample_time(p, 1.0) == pytest.approx(1.0, abs=1e-15)

    def test_median(self):
        p = H.HomotopyParams(eps_sharp=1e-4)
        expected = math.sqrt(1e-4 * (1 + 1e-4)) - 1e-4
        assert H.sample_time(p, 0.5) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(9.9005e-3, rel=1e-4)

    def test_rejects_bad_uniform(self):
        with pytest.raises(ValueError):
            H.sample_time(H.HomotopyParams(), 1.2)

    def test_cdf_inverts_sampler(self):
        p = H.HomotopyParams(eps_sharp=1e-3)
        u = np.linspace(0, 1, 101)
        np.testing.assert_allclose(H.time_cdf(p, H.sample_time(p, u)), u, atol=1e-12)


class TestCondLogDensity:
    def test_prior_value(self):
        assert H.cond_log_density(UNIT, [0.0], [3.0], 0.0) == pytest.approx(-0.5 * math.log(2 * math.pi))

    def test_posterior_value(self):
        assert H.cond_log_density(UNIT, [1.0], [2.0], 1.0) == pytest.approx(-0.5 * math.log(math.pi))

    @pytest.mark.parametrize("t", [0.0, 0.3, 1.0])
    def test_mode_value(self, t):
        p = H.HomotopyParams(omega=1.2, sigma=0.4, dim=3)
        xbar = np.array([0.5, -1.0, 2.0])
        mu = H.cond_stats(p, xbar, t).mean
        var = H.cond_var(p, t)
        assert H.cond_log_density(p, mu, xbar, t) == pytest.approx(-1.5 * math.log(2 * math.pi * var))

    @pytest.mark.parametrize("t", [0.0, 0.25, 0.5, 1.0])
    def test_against_quadrature(self, t):
        p = H.HomotopyParams(omega=1.0, sigma=0.3, dim=1)
        logp, _, _ = bayes_quadrature(p, 2.0, t, GRID)
        sel = slice(40_000, 65_000, 97)
        ours = H.cond_log_density(p, GRID[sel][:, None], np.full((len(GRID[sel]), 1), 2.0),
                                  np.full(len(GRID[sel]), t))
        np.testing.assert_allclose(ours, logp[sel], atol=1e-6)


class TestMarginalPde:
    def test_single_datum_matches_finite_difference(self):
        data = np.zeros((1, 1))
        h = 1e-4

        def rho(t):
            return math.exp(H.marginal_log_density(UNIT, data, np.zeros(1), t))

        fd = (rho(0.5 + h) - rho(0.5 - h)) / (2 * h)
        rhs = H.marginal_homotopy_dt_oracle(UNIT, data, np.zeros(1), 0.5)
        assert rhs == pytest.approx(fd, rel=1e-5)

    def test_symmetric_pair_equals_single(self):
        a = 1.3
        single = H.marginal_homotopy_dt_oracle(UNIT, np.array([[a]]), np.zeros(1), 0.4)
        pair = H.marginal_homotopy_dt_oracle(UNIT, np.array([[-a], [a]]), np.zeros(1), 0.4)
        assert pair == pytest.approx(single, rel=1e-12)

    def test_mass_conservation(self):
        data = np.array([[-1.0], [0.5], [2.0]])
        x = np.linspace(-12, 12, 24_001)
        vals = H.marginal_homotopy_dt_oracle(UNIT, data, x[:, None], 0.3)
        assert abs(np.trapezoid(vals, x)) < 1e-6

    def test_size_limits(self):
        with pytest.raises(ValueError):
            H.marginal_homotopy_dt_oracle(UNIT, np.zeros((65, 1)), np.zeros(1), 0.5)
        with pytest.raises(ValueError):
            H.marginal_homotopy_dt_oracle(UNIT, np.zeros((4, 1)), np.zeros(1), 0.0)
