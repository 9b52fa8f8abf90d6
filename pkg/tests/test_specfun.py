import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from chisq_eb.exceptions import DomainError, PoleError
from chisq_eb.specfun import (
    chisq_cdf,
    chisq_isf,
    chisq_logpdf,
    chisq_pdf,
    chisq_quantile,
    chisq_sf,
    log_gamma,
    noncentral_chisq_cdf,
    noncentral_chisq_pdf,
    noncentral_chisq_sf,
    norm_cdf,
    norm_isf,
    norm_quantile,
    poisson_truncation,
    regularized_gamma_p,
    regularized_gamma_q,
)


class TestLogGamma:
    def test_examples(self):
        assert log_gamma(1.0) == (0.0, 1.0)
        np.testing.assert_allclose(log_gamma(0.5)[0], 0.5723649429247001, rtol=1e-14)
        np.testing.assert_allclose(log_gamma(10.0)[0], math.log(362880.0), rtol=1e-14)

    def test_relative_accuracy_on_range(self):
        a = np.geomspace(1e-3, 170, 400)
        # mpmath-free reference: sum of logs for integers, scipy elsewhere
        ints = np.arange(1, 40)
        ref = np.array([math.log(math.factorial(n - 1)) for n in ints])
        got = np.array([log_gamma(float(n))[0] for n in ints])
        np.testing.assert_allclose(got[2:], ref[2:], rtol=1e-12)
        vec, sign = log_gamma(a)
        assert np.all(sign == 1.0)
        np.testing.assert_allclose(vec, [log_gamma(float(v))[0] for v in a], rtol=1e-12)

    def test_reflection_sign(self):
        # Gamma(-0.5) = -2 sqrt(pi), Gamma(-1.5) = 4 sqrt(pi) / 3
        lg, s = log_gamma(-0.5)
        assert s == -1.0
        np.testing.assert_allclose(lg, math.log(2 * math.sqrt(math.pi)), rtol=1e-13)
        lg, s = log_gamma(-1.5)
        assert s == 1.0
        np.testing.assert_allclose(lg, math.log(4 * math.sqrt(math.pi) / 3), rtol=1e-13)

    @pytest.mark.parametrize("a", [0.0, -1.0, -4.0])
    def test_poles(self, a):
        with pytest.raises(PoleError):
            log_gamma(a)

    def test_pole_in_array(self):
        with pytest.raises(PoleError):
            log_gamma(np.array([0.5, -2.0]))


class TestIncompleteGamma:
    def test_complement(self):
        a = np.array([0.5, 1.0, 3.5, 20.0])
        x = np.array([0.1, 2.0, 3.0, 25.0])
        np.testing.assert_allclose(regularized_gamma_p(a, x) + regularized_gamma_q(a, x), 1.0, atol=1e-15)

    def test_exponential_case(self):
        x = np.linspace(0.0, 5.0, 11)
        np.testing.assert_allclose(regularized_gamma_p(1.0, x), 1 - np.exp(-x), atol=1e-15)


class TestChisq:
    def test_cdf_at_zero(self):
        for k in (1, 2, 7, 30):
            assert chisq_cdf(0.0, k) == 0.0

    def test_tail_probability_examples(self):
        z2 = 1.645**2
        assert abs(chisq_sf(3 * z2, 3) - 0.04) <= 0.005
        assert abs(chisq_sf(7 * z2, 7) - 0.008) <= 0.002

    def test_matches_scipy(self):
        x = np.linspace(0.01, 100, 300)
        for k in (1, 3, 7, 12.5):
            np.testing.assert_allclose(chisq_cdf(x, k), stats.chi2.cdf(x, k), atol=1e-10)
            np.testing.assert_allclose(chisq_pdf(x, k), stats.chi2.pdf(x, k), rtol=1e-12)

    def test_sf_far_tail(self):
        # 1 - cdf would underflow to zero here
        assert chisq_sf(400.0, 7) > 0
        np.testing.assert_allclose(chisq_sf(400.0, 7), stats.chi2.sf(400.0, 7), rtol=1e-10)

    def test_golden_sf(self):
        # P(chi2_7 >= 19.7273), 30-digit mpmath value
        np.testing.assert_allclose(chisq_sf(19.7273, 7), 0.006189830023803803, rtol=1e-12)

    def test_logpdf_at_zero(self):
        assert chisq_logpdf(0.0, 3) == -np.inf
        np.testing.assert_allclose(chisq_pdf(0.0, 2), 0.5)

    def test_monotonicity(self):
        x = np.linspace(0.05, 100, 500)
        prev = None
        for k in range(1, 13):
            c = chisq_cdf(x, k)
            assert np.all(np.diff(c) >= 0)
            assert np.all(np.diff(c)[c[1:] < 1 - 1e-15] > 0)
            if prev is not None:
                assert np.all(c <= prev)
                inner = (prev > 1e-300) & (prev < 1 - 1e-15)
                assert np.all(c[inner] < prev[inner])
            prev = c

    @pytest.mark.parametrize("fn", [chisq_cdf, chisq_sf, chisq_pdf])
    def test_domain(self, fn):
        with pytest.raises(DomainError):
            fn(-1.0, 3)
        with pytest.raises(DomainError):
            fn(1.0, 0.0)


class TestQuantiles:
    def test_round_trip_examples(self):
        for x in (1.0, 7.0, 30.0):
            np.testing.assert_allclose(chisq_quantile(chisq_cdf(x, 7), 7), x, atol=1e-6)

    def test_exponential_median(self):
        np.testing.assert_allclose(chisq_quantile(0.5, 2), 2 * math.log(2), rtol=1e-12)

    def test_upper_quantile_definition(self):
        q = chisq_quantile(0.9, 7)
        np.testing.assert_allclose(chisq_sf(q, 7), 0.1, atol=1e-9)
        np.testing.assert_allclose(q, 12.017036623780527, rtol=1e-12)

    def test_isf_tiny_tail(self):
        x = chisq_isf(1e-20, 7)
        np.testing.assert_allclose(chisq_sf(x, 7), 1e-20, rtol=1e-8)

    def test_vectorized(self):
        p = np.array([0.1, 0.5, 0.9])
        np.testing.assert_allclose(chisq_quantile(p, 5), stats.chi2.ppf(p, 5), rtol=1e-10)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
    def test_domain(self, p):
        with pytest.raises(DomainError):
            chisq_quantile(p, 3)

    @settings(max_examples=60, deadline=None)
    @given(
        p=st.floats(min_value=1e-6, max_value=1 - 1e-6),
        k=st.floats(min_value=0.5, max_value=60),
    )
    def test_round_trip_property(self, p, k):
        x = chisq_quantile(p, k)
        assert abs(chisq_cdf(x, k) - p) <= 1e-9


class TestNoncentral:
    def test_central_reduction(self):
        x = np.linspace(0.1, 40, 50)
        np.testing.assert_array_equal(noncentral_chisq_cdf(x, 7, 0.0), chisq_cdf(x, 7))
        np.testing.assert_allclose(noncentral_chisq_pdf(x, 7, 0.0), chisq_pdf(x, 7), rtol=1e-14)

    def test_matches_scipy(self):
        x = np.linspace(0.1, 120, 200)
        for k, lam in ((3, 0.5), (7, 20.0), (7, 150.0)):
            np.testing.assert_allclose(
                noncentral_chisq_cdf(x, k, lam), stats.ncx2.cdf(x, k, lam), atol=1e-10
            )
            np.testing.assert_allclose(
                noncentral_chisq_pdf(x, k, lam), stats.ncx2.pdf(x, k, lam), rtol=1e-8, atol=1e-300
            )

    def test_small_lambda_approximation(self):
        x = np.linspace(5, 20, 31)
        exact = noncentral_chisq_sf(x, 7, 0.5)
        approx = chisq_sf(x / (1 + 0.5 / 7), 7)
        assert np.max(np.abs(exact - approx)) <= 0.01

    def test_total_mass(self):
        np.testing.assert_allclose(noncentral_chisq_cdf(1e6, 7, 10.0), 1.0, atol=1e-10)

    def test_stochastic_ordering(self):
        lam = np.linspace(0, 60, 61)
        for x in (2.0, 10.0, 40.0):
            c = noncentral_chisq_cdf(x, 5, lam)
            assert np.all(np.diff(c) <= 1e-15)

    def test_sf_complements_cdf(self):
        x = np.array([1.0, 10.0, 50.0])
        np.testing.assert_allclose(
            noncentral_chisq_cdf(x, 7, 12.0) + noncentral_chisq_sf(x, 7, 12.0), 1.0, atol=1e-12
        )

    def test_negative_lambda(self):
        with pytest.raises(DomainError):
            noncentral_chisq_cdf(1.0, 3, -1.0)

    def test_poisson_truncation(self):
        j = poisson_truncation(10.0)
        assert stats.poisson.sf(j, 10.0) < 1e-12
        assert stats.poisson.sf(j - 1, 10.0) >= 1e-12
        assert poisson_truncation(0.0) == 0


class TestNormal:
    def test_examples(self):
        assert norm_quantile(0.5) == 0.0
        assert abs(norm_quantile(0.95) - 1.645) <= 0.001
        assert abs(norm_quantile(0.975) - 1.96) <= 0.001

    def test_isf_tail(self):
        np.testing.assert_allclose(norm_isf(1e-300), -stats.norm.ppf(1e-300), rtol=1e-12)
        np.testing.assert_allclose(norm_cdf(norm_quantile(0.3)), 0.3, rtol=1e-14)

    @pytest.mark.parametrize("p", [0.0, 1.0, np.nan])
    def test_domain(self, p):
        with pytest.raises(DomainError):
            norm_quantile(p)
