import math

import mpmath
import numpy as np
import pytest
from scipy import integrate, stats

from cfcalib.distributions import (
    LOG_DENSITY_CAP,
    SimplexParams,
    DoubleGammaParams,
    TransformedNormal,
    categorical_log_pmf,
    dirichlet_log_pdf,
    double_gamma_cdf,
    double_gamma_entropy,
    double_gamma_log_pdf,
    double_gamma_sample,
    double_gamma_std,
    half_normal_log_pdf,
    sample_kl_estimate,
    softplus,
    softplus_inverse,
    transformed_normal_log_pdf,
)
from cfcalib.errors import DomainError


def dg_pdf(x, p):
    return math.exp(double_gamma_log_pdf(x, p))


class TestDoubleGammaParams:
    @pytest.mark.parametrize("mu,beta,gamma", [(0, 0, 1), (0, -1, 1), (0, 1, 0), (0, 1, -2), (np.nan, 1, 1)])
    def test_invalid(self, mu, beta, gamma):
        with pytest.raises(DomainError):
            DoubleGammaParams(mu, beta, gamma)

    def test_frozen(self):
        p = DoubleGammaParams(0, 1, 1)
        with pytest.raises(Exception):
            p.beta = 2.0


class TestDoubleGammaLogPdf:
    def test_laplace_at_location(self):
        assert double_gamma_log_pdf(0.0, DoubleGammaParams(0, 1, 1)) == pytest.approx(math.log(0.5), abs=1e-15)

    def test_laplace_tail(self):
        assert double_gamma_log_pdf(2.0, DoubleGammaParams(0, 1, 1)) == pytest.approx(math.log(0.5) - 2, abs=1e-14)

    def test_arbitrary_precision_value(self):
        mpmath.mp.dps = 40
        z = mpmath.mpf("1.0") / 2
        expected = mpmath.log(z**2 * mpmath.e ** (-z) / (2 * 2 * mpmath.gamma(3)))
        got = double_gamma_log_pdf(1.5, DoubleGammaParams(0.5, 2.0, 3.0))
        assert got == pytest.approx(float(expected), abs=1e-13)

    @pytest.mark.parametrize("beta", [0.5, 1, 2, 5])
    @pytest.mark.parametrize("gamma", [0.5, 1, 2, 5])
    def test_normalises(self, beta, gamma):
        p = DoubleGammaParams(0.3, beta, gamma)
        # integrate each half separately so the quadrature sees the pole/kink at an endpoint
        right, _ = integrate.quad(lambda x: dg_pdf(x, p), 0.3, np.inf, epsabs=1e-12, epsrel=1e-10, limit=200)
        left, _ = integrate.quad(lambda x: dg_pdf(x, p), -np.inf, 0.3, epsabs=1e-12, epsrel=1e-10, limit=200)
        assert left + right == pytest.approx(1.0, abs=1e-6)

    def test_gamma_one_matches_laplace(self):
        mu, beta = 1.3, 0.7
        x = np.linspace(mu - 10 * beta, mu + 10 * beta, 2001)
        got = double_gamma_log_pdf(x, DoubleGammaParams(mu, beta, 1.0))
        np.testing.assert_allclose(got, stats.laplace(mu, beta).logpdf(x), rtol=0, atol=1e-12)

    def test_symmetry_exact(self):
        p = DoubleGammaParams(0.25, 1.7, 2.3)
        # dyadic offsets keep mu +/- d exact in floating point
        d = np.arange(1, 2000) / 64.0
        assert np.array_equal(double_gamma_log_pdf(p.mu + d, p), double_gamma_log_pdf(p.mu - d, p))

    def test_pole_is_capped(self):
        v = double_gamma_log_pdf(0.0, DoubleGammaParams(0.0, 1.0, 0.5))
        assert v == LOG_DENSITY_CAP
        assert np.isfinite(v)

    def test_finite_off_location(self):
        x = np.array([-1e3, -1.0, 1e-300, 5.0])
        assert np.all(np.isfinite(double_gamma_log_pdf(x, DoubleGammaParams(0.0, 1.0, 0.5))))


class TestDoubleGammaEntropy:
    def test_laplace(self):
        assert double_gamma_entropy(DoubleGammaParams(0, 1, 1)) == pytest.approx(math.log(2) + 1, abs=1e-14)

    def test_scale_shift(self):
        assert double_gamma_entropy(DoubleGammaParams(0, 2, 1)) == pytest.approx(math.log(4) + 1, abs=1e-14)

    def test_monte_carlo(self):
        p = DoubleGammaParams(0, 1, 2.5)
        xs = double_gamma_sample(p, np.random.default_rng(1), 1_000_000)
        mc = -np.mean(double_gamma_log_pdf(xs, p))
        assert double_gamma_entropy(p) == pytest.approx(mc, rel=5e-3)


class TestDoubleGammaSample:
    def test_mean_is_location(self):
        xs = double_gamma_sample(DoubleGammaParams(5, 1, 1), np.random.default_rng(2), 1_000_000)
        assert abs(xs.mean() - 5) < 0.01

    def test_laplace_std(self):
        xs = double_gamma_sample(DoubleGammaParams(0, 1, 1), np.random.default_rng(3), 1_000_000)
        assert xs.std() == pytest.approx(math.sqrt(2), rel=0.01)

    @pytest.mark.parametrize("beta,gamma", [(1, 1), (0.5, 3), (2, 0.7)])
    def test_std_formula_matches_samples(self, beta, gamma):
        p = DoubleGammaParams(0, beta, gamma)
        xs = double_gamma_sample(p, np.random.default_rng(4), 1_000_000)
        assert double_gamma_std(p) == pytest.approx(xs.std(), rel=0.01)

    def test_chi_square_against_pdf(self):
        p = DoubleGammaParams(0, 1, 3)
        xs = double_gamma_sample(p, np.random.default_rng(5), 1_000_000)
        edges = np.linspace(-10, 10, 41)
        observed, _ = np.histogram(xs, bins=edges)
        probs = np.array([integrate.quad(lambda x: dg_pdf(x, p), a, b)[0] for a, b in zip(edges[:-1], edges[1:])])
        expected = probs / probs.sum() * observed.sum()
        keep = expected > 5
        _, pval = stats.chisquare(observed[keep], expected[keep] * observed[keep].sum() / expected[keep].sum())
        assert pval > 0.01

    def test_ks_against_integrated_cdf(self):
        p = DoubleGammaParams(0.5, 1.5, 2.0)
        grid = np.linspace(p.mu - 40, p.mu + 40, 8001)
        dens = np.exp(double_gamma_log_pdf(grid, p))
        cdf_grid = integrate.cumulative_trapezoid(dens, grid, initial=0.0)
        xs = double_gamma_sample(p, np.random.default_rng(6), 100_000)
        res = stats.kstest(xs, lambda x: np.interp(x, grid, cdf_grid))
        assert res.statistic < 0.01

    def test_closed_form_cdf_matches_quadrature(self):
        p = DoubleGammaParams(-0.2, 0.8, 1.7)
        for x in (-3.0, -0.2, 0.1, 2.5):
            num, _ = integrate.quad(lambda t: dg_pdf(t, p), -np.inf, x)
            assert double_gamma_cdf(x, p) == pytest.approx(num, abs=1e-8)

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            double_gamma_sample(DoubleGammaParams(), np.random.default_rng(0), 0)


class TestSoftplus:
    def test_round_trip(self):
        y = np.array([1e-8, 0.1, 1.0, 30.0, 800.0])
        for c in (0.5, 1.0, 4.0):
            np.testing.assert_allclose(softplus(softplus_inverse(y, c), c), y, rtol=1e-12)

    def test_large_input_stable(self):
        assert softplus(1000.0) == pytest.approx(1000.0)
        assert np.isfinite(softplus_inverse(1000.0))


class TestTransformedNormal:
    def test_standard_normal(self):
        p = TransformedNormal(0.0, 1.0, "real")
        assert transformed_normal_log_pdf(0.0, p) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)

    def test_support_violation(self):
        with pytest.raises(DomainError):
            transformed_normal_log_pdf(-0.1, TransformedNormal(1.0, 1.0, "nonneg"))
        with pytest.raises(DomainError):
            transformed_normal_log_pdf(0.1, TransformedNormal(1.0, 1.0, "nonpos"))

    def test_numerical_change_of_variables(self):
        p = TransformedNormal(1.0, 1.0, "nonneg", 1.0)
        x, h = 1.2, 1e-6

        def inv(y):
            return math.log(math.expm1(y))

        jac = (inv(x + h) - inv(x - h)) / (2 * h)
        expected = stats.norm(1.0, 1.0).logpdf(inv(x)) + math.log(abs(jac))
        assert transformed_normal_log_pdf(x, p) == pytest.approx(expected, abs=1e-8)

    @pytest.mark.parametrize("support", ["real", "nonneg", "nonpos"])
    def test_integrates_to_one(self, support):
        p = TransformedNormal(0.4, 0.8, support, 1.0)

        def f(x):
            return math.exp(transformed_normal_log_pdf(x, p))

        if support == "real":
            total, _ = integrate.quad(f, -np.inf, np.inf, epsabs=1e-12)
        elif support == "nonneg":
            total, _ = integrate.quad(f, 1e-300, np.inf, epsabs=1e-12, limit=200)
        else:
            total, _ = integrate.quad(f, -np.inf, -1e-300, epsabs=1e-12, limit=200)
        assert total == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("support,check", [("nonneg", np.greater_equal), ("nonpos", np.less_equal)])
    def test_samples_respect_support(self, support, check):
        xs = TransformedNormal(-3.0, 5.0, support).sample(np.random.default_rng(7), 10_000)
        assert np.all(check(xs, 0.0))

    def test_invalid_sigma(self):
        with pytest.raises(DomainError):
            TransformedNormal(0.0, 0.0)


class TestSimplexAndDirichlet:
    def test_simplex_invariants(self):
        with pytest.raises(DomainError):
            SimplexParams((0.5, 0.6))
        with pytest.raises(DomainError):
            SimplexParams((1.2, -0.2))
        with pytest.raises(DomainError):
            SimplexParams((0.5, 0.5), (1.0, 0.0))
        assert SimplexParams((0.25,) * 4).k == 4

    def test_categorical(self):
        p = SimplexParams((0.1, 0.2, 0.7))
        assert categorical_log_pmf(2, p) == pytest.approx(math.log(0.7))

    def test_dirichlet_matches_scipy(self):
        a = np.array([0.5, 2.0, 3.5])
        x = np.array([0.2, 0.3, 0.5])
        assert dirichlet_log_pdf(x, a) == pytest.approx(stats.dirichlet(a).logpdf(x), abs=1e-12)


class TestHalfNormal:
    def test_matches_scipy(self):
        x = np.array([0.0, 0.3, 2.0])
        np.testing.assert_allclose(half_normal_log_pdf(x, 1.7), stats.halfnorm(scale=1.7).logpdf(x), atol=1e-14)
        assert half_normal_log_pdf(-1.0, 1.0) == -np.inf


class TestSampleKl:
    def test_identical(self):
        xs = np.random.default_rng(8).normal(size=1000)

        def lp(x):
            return stats.norm.logpdf(x)

        assert sample_kl_estimate(xs, lp, lp) == 0.0

    def test_gaussian_closed_form(self):
        xs = np.random.default_rng(9).normal(size=1_000_000)
        kl = sample_kl_estimate(xs, stats.norm(0, 1).logpdf, stats.norm(1, 1).logpdf)
        assert kl == pytest.approx(0.5, abs=0.01)

    def test_laplace_closed_form(self):
        xs = stats.laplace(0, 1).rvs(size=1_000_000, random_state=10)
        # KL(Lap(0,b1) || Lap(0,b2)) = log(b2/b1) + b1/b2 - 1
        expected = math.log(2.0) + 0.5 - 1.0
        kl = sample_kl_estimate(xs, stats.laplace(0, 1).logpdf, stats.laplace(0, 2).logpdf)
        assert kl == pytest.approx(expected, abs=0.01)

    def test_empty(self):
        with pytest.raises(ValueError):
            sample_kl_estimate([], np.log, np.log)
