import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import genextreme

from idfstudy.data import AnnualMaxSeries
from idfstudy.errors import ContractError, EstimationError
from idfstudy.gev import (GevParams, gev_cdf, gev_logpdf, gev_loglik, gev_quantile, gev_random, gringorten,
                          lmoment_fit, sample_lmoments)


def test_gumbel_at_location():
    assert gev_cdf(0.0, GevParams(0, 1, 0)) == pytest.approx(math.exp(-1), abs=1e-15)


def test_frechet_point():
    assert gev_cdf(1.0, GevParams(0, 1, 0.5)) == pytest.approx(math.exp(-1.5 ** -2), abs=1e-12)
    assert gev_cdf(1.0, GevParams(0, 1, 0.5)) == pytest.approx(0.641180, abs=1e-6)


def test_support_edges():
    p = GevParams(0, 1, -0.5)
    assert gev_cdf(2.5, p) == 1.0
    q = GevParams(0, 1, 0.5)
    assert gev_cdf(-2.5, q) == 0.0


def test_non_finite_z():
    with pytest.raises(ContractError):
        gev_cdf(np.nan, GevParams(0, 1, 0))


def test_params_invariants():
    with pytest.raises(ContractError):
        GevParams(0, 0, 0)
    with pytest.raises(ContractError):
        GevParams(0, 1, np.inf)


@settings(max_examples=60, deadline=None)
@given(st.floats(-50, 50), st.floats(0.1, 20), st.floats(-0.6, 0.6, allow_subnormal=False), st.floats(-3, 3))
def test_cdf_matches_scipy(mu, sigma, xi, s):
    z = mu + s * sigma
    ours = gev_cdf(z, GevParams(mu, sigma, xi))
    ref = genextreme.cdf(z, -xi, loc=mu, scale=sigma)
    assert ours == pytest.approx(ref, abs=1e-12)


def test_logpdf_matches_finite_difference(rng):
    for _ in range(100):
        p = GevParams(rng.uniform(-5, 5), rng.uniform(0.5, 3), rng.uniform(-0.4, 0.4))
        z = float(gev_quantile(rng.uniform(0.05, 0.95), p.mu0, p.sigma, p.xi))
        h = 1e-5
        fd = (gev_cdf(z + h, p) - gev_cdf(z - h, p)) / (2 * h)
        assert math.exp(gev_logpdf(z, p.mu0, p.sigma, p.xi)) == pytest.approx(fd, abs=1e-6)


def test_logpdf_gumbel_switch_continuity():
    a = gev_logpdf(1.3, 0.2, 1.1, 0.0)
    b = gev_logpdf(1.3, 0.2, 1.1, 1e-7)
    assert a == pytest.approx(b, abs=1e-6)


def test_loglik_examples():
    one = AnnualMaxSeries("S", 1, [2000], [5.0])
    assert gev_loglik(one, GevParams(5.0, 1.0, 0.0)) == pytest.approx(-1.0, abs=1e-15)
    far = AnnualMaxSeries("S", 1, [2000], [100.0])
    assert gev_loglik(far, GevParams(5.0, 1.0, -0.5)) == -np.inf


def test_loglik_nonstationary_uses_years():
    am = AnnualMaxSeries("S", 1, [2000, 2010], [5.0, 7.0])
    p = GevParams(5.0, 1.0, 0.0, mu1=0.2)
    expected = 2 * -1.0
    assert gev_loglik(am, p, "nonstationary") == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ContractError):
        gev_loglik(am, p, "weird")


def test_loglik_peaks_near_truth():
    rng = np.random.default_rng(3)
    truth = GevParams(21.38, 7.59, -0.10)
    z = gev_random(truth, 10_000, rng)
    am = AnnualMaxSeries("S", 1, np.arange(z.size), z)
    best, arg = -np.inf, None
    for mu in np.linspace(20.5, 22.5, 9):
        for sg in np.linspace(7.0, 8.2, 7):
            for xi in np.linspace(-0.16, -0.04, 7):
                ll = gev_loglik(am, GevParams(mu, sg, xi))
                if ll > best:
                    best, arg = ll, (mu, sg, xi)
    assert abs(arg[0] - 21.38) <= 0.5 and abs(arg[1] - 7.59) <= 0.4 and abs(arg[2] + 0.10) <= 0.04


@settings(max_examples=60, deadline=None)
@given(st.floats(-20, 20), st.floats(0.1, 10), st.floats(-0.5, 0.5), st.floats(1.01, 500))
def test_quantile_inverts_cdf(mu, sigma, xi, T):
    q = gev_quantile(1 - 1 / T, mu, sigma, xi)
    assert gev_cdf(q, GevParams(mu, sigma, xi)) == pytest.approx(1 - 1 / T, abs=1e-10)


def test_quantile_matches_scipy_ppf():
    for xi in (-0.3, -0.1, 0.0, 0.2):
        for prob in (0.1, 0.5, 0.9, 0.98):
            assert gev_quantile(prob, 3.0, 2.0, xi) == pytest.approx(genextreme.ppf(prob, -xi, 3.0, 2.0), rel=1e-10)


def test_gringorten_first_position():
    assert gringorten(10)[0] == pytest.approx(0.56 / 10.12, abs=1e-12)
    assert gringorten(10)[0] == pytest.approx(0.055336, abs=1e-6)


def test_sample_lmoments_against_direct_formula(rng):
    x = rng.gamma(2, 3, 30)
    xs = np.sort(x)
    n = x.size
    # direct definitions from order-statistic pairs and triples
    l2 = sum(xs[j] - xs[i] for i in range(n) for j in range(i + 1, n)) / (n * (n - 1))
    l3 = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                l3 += xs[k] - 2 * xs[j] + xs[i]
    l3 *= 2.0 / (n * (n - 1) * (n - 2))
    a, b, t3 = sample_lmoments(x)
    assert a == pytest.approx(x.mean(), rel=1e-12)
    assert b == pytest.approx(l2, rel=1e-10)
    assert t3 == pytest.approx(l3 / l2, rel=1e-9)


def test_lmoment_fit_gumbel_sample():
    rng = np.random.default_rng(7)
    z = gev_random(GevParams(0, 1, 0), 10_000, rng)
    assert abs(lmoment_fit(z).xi) <= 0.03


def test_lmoment_fit_recovers_parameters():
    rng = np.random.default_rng(8)
    z = gev_random(GevParams(21.38, 7.59, -0.1), 20_000, rng)
    p = lmoment_fit(z)
    assert p.mu0 == pytest.approx(21.38, rel=0.02)
    assert p.sigma == pytest.approx(7.59, rel=0.03)
    assert p.xi == pytest.approx(-0.1, abs=0.03)


def test_lmoment_equivariance(rng):
    z = rng.gamma(3, 4, 60)
    base = lmoment_fit(z)
    shifted = lmoment_fit(z + 7.5)
    assert shifted.mu0 == pytest.approx(base.mu0 + 7.5, abs=1e-9)
    assert shifted.sigma == pytest.approx(base.sigma, rel=1e-12)
    scaled = lmoment_fit(3.0 * z)
    assert scaled.mu0 == pytest.approx(3 * base.mu0, rel=1e-12)
    assert scaled.sigma == pytest.approx(3 * base.sigma, rel=1e-12)
    assert scaled.xi == pytest.approx(base.xi, abs=1e-12)


def test_lmoment_errors():
    with pytest.raises(ContractError):
        lmoment_fit([1, 2, 3, 4])
    with pytest.raises(EstimationError):
        lmoment_fit([2.0] * 10)
