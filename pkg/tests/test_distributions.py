import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from cradle.numerics import autodiff as ad
from cradle.numerics.distributions import (
    GaussianParams,
    bernoulli_kl,
    bernoulli_kl_from_logits,
    gamma_poisson_log_prob,
    gamma_poisson_sample,
    normal_kl,
    normal_log_prob,
    normal_rsample,
    relaxed_bernoulli_rsample,
)

# Reference values evaluated with mpmath at 30 digits.
KL_N1_N0 = 0.5
KL_N02_N01 = 0.806852819440054690582767878542
KL_BERN_05_001 = 1.61446308036085109519253376201
LOG_HALF = -0.693147180559945309417232121458
NB_X3_MU25_TH17 = -2.05350367193708390784812235159


def kl(qm, qs, pm, ps):
    return float(normal_kl(GaussianParams(qm, qs), GaussianParams(pm, ps)).data)


class TestNormal:
    def test_closed_form_values(self):
        assert kl(1.0, 1.0, 0.0, 1.0) == pytest.approx(KL_N1_N0, abs=1e-8)
        assert kl(0.0, 2.0, 0.0, 1.0) == pytest.approx(KL_N02_N01, abs=1e-8)

    def test_identical_is_zero(self):
        assert kl(np.array([0.3, -1.2]), np.array([0.7, 2.0]), np.array([0.3, -1.2]), np.array([0.7, 2.0])) == 0.0

    @pytest.mark.parametrize("qm,qs,expected", [(1.0, 1.0, KL_N1_N0), (0.0, 2.0, KL_N02_N01)])
    def test_monte_carlo_agrees(self, qm, qs, expected):
        rng = np.random.default_rng(11)
        z = qm + qs * rng.standard_normal(10**6)
        ratio = stats.norm.logpdf(z, qm, qs) - stats.norm.logpdf(z, 0, 1)
        se = ratio.std() / math.sqrt(len(z))
        assert abs(ratio.mean() - expected) < 3 * se

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            kl(0.0, 0.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            kl(0.0, 1.0, 0.0, -1.0)

    @given(st.floats(-5, 5), st.floats(0.05, 5), st.floats(-5, 5), st.floats(0.05, 5))
    def test_nonnegative(self, qm, qs, pm, ps):
        assert kl(qm, qs, pm, ps) >= -1e-12

    def test_rsample(self):
        g = GaussianParams(1.0, 2.0)
        assert float(normal_rsample(g, np.array(0.5)).data) == 2.0
        assert float(normal_rsample(g, np.array(0.0)).data) == 1.0
        assert float(normal_rsample(GaussianParams(1.0, 0.0), np.array(7.3)).data) == 1.0

    def test_log_prob_matches_scipy(self):
        x = np.array([0.1, -2.0, 3.0])
        got = float(normal_log_prob(x, GaussianParams(0.5, 1.5)).data)
        assert got == pytest.approx(stats.norm.logpdf(x, 0.5, 1.5).sum(), abs=1e-12)


class TestBernoulli:
    def test_closed_form(self):
        assert float(bernoulli_kl(0.5, 0.01).data) == pytest.approx(KL_BERN_05_001, abs=1e-8)

    def test_two_outcome_sum(self):
        q, p = 0.5, 0.01
        brute = sum(qq * math.log(qq / pp) for qq, pp in ((q, p), (1 - q, 1 - p)))
        assert float(bernoulli_kl(q, p).data) == pytest.approx(brute, abs=1e-12)

    def test_equal_is_zero(self):
        assert float(bernoulli_kl(np.full(200, 0.01), 0.01).data) == pytest.approx(0.0, abs=1e-15)

    def test_boundary_rejected(self):
        for q in (0.0, 1.0):
            with pytest.raises(ValueError):
                bernoulli_kl(q, 0.5)

    @given(st.floats(-30, 30), st.floats(0.001, 0.999))
    def test_logit_form_matches(self, logit, p):
        q = 1 / (1 + math.exp(-logit))
        got = float(bernoulli_kl_from_logits(np.array(logit), p).data)
        assert got >= -1e-12
        if 1e-12 < q < 1 - 1e-12:
            assert got == pytest.approx(float(bernoulli_kl(q, p).data), rel=1e-8, abs=1e-10)


class TestRelaxedBernoulli:
    def test_symmetry_point(self):
        for tau in (0.1, 0.5, 1.0, 3.0):
            assert float(relaxed_bernoulli_rsample(np.array(0.0), tau, np.array(0.5)).data) == 0.5

    def test_large_logits_saturate(self):
        assert float(relaxed_bernoulli_rsample(np.array(60.0), 1.0, np.array(0.3)).data) == pytest.approx(1.0)

    def test_hard_sample_frequency(self):
        rng = np.random.default_rng(5)
        logit = math.log(0.3 / 0.7)
        u = rng.uniform(size=10**5)
        m = relaxed_bernoulli_rsample(np.full(10**5, logit), 0.5, u, hard=True).data
        assert set(np.unique(m)) <= {0.0, 1.0}
        assert abs(m.mean() - 0.3) < 0.01

    def test_low_temperature_mean_converges(self):
        rng = np.random.default_rng(6)
        u = rng.uniform(size=40000)
        soft = relaxed_bernoulli_rsample(np.full(40000, 0.8), 0.02, u).data
        target = 1 / (1 + math.exp(-0.8))
        assert abs(soft.mean() - target) < 3 * soft.std() / math.sqrt(len(u))

    def test_straight_through_gradient_is_relaxed(self):
        logits = ad.Tensor(np.array([0.3, -0.4]), requires_grad=True)
        u = np.array([0.6, 0.2])
        (g_hard,) = ad.grad(relaxed_bernoulli_rsample(logits, 0.7, u, hard=True).sum(), [logits])
        logits2 = ad.Tensor(np.array([0.3, -0.4]), requires_grad=True)
        (g_soft,) = ad.grad(relaxed_bernoulli_rsample(logits2, 0.7, u).sum(), [logits2])
        np.testing.assert_allclose(g_hard, g_soft)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            relaxed_bernoulli_rsample(np.zeros(2), 0.0, np.full(2, 0.5))
        with pytest.raises(ValueError):
            relaxed_bernoulli_rsample(np.zeros(2), 1.0, np.array([0.0, 0.5]))


def nb(x, mu, theta):
    return float(gamma_poisson_log_prob(np.asarray(x), np.asarray(mu, dtype=float), theta).data)


class TestGammaPoisson:
    def test_zero_count(self):
        assert nb(0, 1.0, 1.0) == pytest.approx(LOG_HALF, abs=1e-8)

    def test_interior_value(self):
        assert nb(3, 2.5, 1.7) == pytest.approx(NB_X3_MU25_TH17, abs=1e-8)

    def test_matches_scipy_nbinom(self):
        x = np.arange(30)
        mu, th = 4.2, 0.8
        ref = stats.nbinom.logpmf(x, th, th / (th + mu))
        got = gamma_poisson_log_prob(x, np.full(30, mu), th, axis=None)
        assert float(got.data) == pytest.approx(ref.sum(), abs=1e-9)

    def test_poisson_limit(self):
        x, mu = np.meshgrid(np.arange(11), np.linspace(0.5, 10, 8))
        lp = gamma_poisson_log_prob(x, mu, 1e6, axis=()).data
        np.testing.assert_allclose(lp, stats.poisson.logpmf(x, mu), atol=1e-4, rtol=0)

    def test_normalises(self):
        x = np.arange(10**4 + 1)
        lp = gamma_poisson_log_prob(x, np.full(x.shape, 5.0), 2.0, axis=()).data
        assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-8)

    @given(st.floats(0.1, 50), st.floats(0.2, 20))
    def test_normalises_over_truncated_support(self, mu, theta):
        x = np.arange(10**4 + 1)
        lp = gamma_poisson_log_prob(x, np.full(x.shape, mu), theta, axis=()).data
        assert abs(np.exp(lp).sum() - 1.0) < 1e-8

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            nb(-1, 1.0, 1.0)
        with pytest.raises(ValueError):
            nb(1.5, 1.0, 1.0)
        with pytest.raises(ValueError):
            nb(1, 0.0, 1.0)

    def test_sampler_mean(self):
        rng = np.random.default_rng(2)
        draws = gamma_poisson_sample(np.full(10**5, 7.0), 3.0, rng)
        var = 7.0 + 7.0**2 / 3.0
        assert abs(draws.mean() - 7.0) < 3 * math.sqrt(var / 10**5)
        assert draws.dtype == np.int64
