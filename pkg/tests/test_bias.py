import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import gaussian_kde, ks_2samp, norm

from idfstudy.bias import (EQR_FLAG, KdeModel, eqm_projected, eqr_projected, fit_distribution, kde_cdf,
                           kde_quantile, ks_distance, qm_historical, silverman_bandwidth)
from idfstudy.data import AnnualMaxSeries
from idfstudy.errors import ContractError, EstimationError
from idfstudy.gev import GevParams, gev_random

TRUTH = GevParams(21.38, 7.59, -0.10)


def _am(values, tag="model:a", start=1970):
    values = np.asarray(values, dtype=float)
    return AnnualMaxSeries("S", 1, np.arange(start, start + values.size), values, tag)


def _gev(n, seed, p=TRUTH):
    z = gev_random(p, 3 * n, np.random.default_rng(seed))
    return z[z > 0.5][:n]


def test_bandwidth_closed_form():
    # std = 1 and IQR/1.34 = 1 -> 0.9 * 100**-0.2
    assert 0.9 * 100 ** -0.2 == pytest.approx(0.358296, abs=1e-6)
    x = norm.ppf((np.arange(100) + 0.5) / 100)
    x = (x - x.mean()) / x.std(ddof=1)
    h = silverman_bandwidth(x)
    q75, q25 = np.percentile(x, [75, 25])
    assert h == pytest.approx(0.9 * min(1.0, (q75 - q25) / 1.34) * 100 ** -0.2, rel=1e-12)


def test_bandwidth_homogeneity_and_errors(rng):
    x = rng.gamma(2, 3, 50)
    assert silverman_bandwidth(4.0 * x) == pytest.approx(4.0 * silverman_bandwidth(x), rel=1e-12)
    with pytest.raises(EstimationError):
        silverman_bandwidth([2.0] * 10)
    with pytest.raises(ContractError):
        silverman_bandwidth([1.0])


def test_kde_cdf_examples(rng):
    m = KdeModel(np.array([-1.0, 1.0]), 0.7)
    assert kde_cdf(m, 0.0) == pytest.approx(0.5, abs=1e-15)
    big = KdeModel.fit(rng.standard_normal(5000))
    assert abs(kde_cdf(big, 0.0) - 0.5) <= 0.02


def test_kde_pdf_matches_scipy(rng):
    x = rng.gamma(2, 3, 80)
    m = KdeModel.fit(x)
    ref = gaussian_kde(x, bw_method=m.bandwidth_h / np.std(x, ddof=1))
    grid = np.linspace(x.min(), x.max(), 25)
    np.testing.assert_allclose(m.pdf(grid), ref(grid), rtol=1e-10)


def test_kde_quantile_inverts(rng):
    x = rng.gamma(2, 3, 60)
    m = KdeModel.fit(x)
    pts = np.linspace(x.min(), x.max(), 40)
    np.testing.assert_allclose(kde_quantile(m, kde_cdf(m, pts)), pts, atol=1e-8)
    with pytest.raises(ContractError):
        kde_quantile(m, 1.0)
    assert kde_quantile(m, 1e-9) < x.min()


def test_kde_model_invariants():
    with pytest.raises(EstimationError):
        KdeModel(np.array([1.0, 1.0]), 1.0)
    with pytest.raises(EstimationError):
        KdeModel(np.array([1.0, 2.0]), 0.0)


def test_unknown_method():
    with pytest.raises(ContractError):
        fit_distribution(np.arange(1, 20.0), "normal")


@pytest.mark.parametrize("method", ["gev", "kde"])
def test_historical_identity(method):
    for seed in range(20):
        z = _gev(41, seed)
        out = qm_historical(_am(z), _am(z, "observed"), method)
        np.testing.assert_allclose(out.values, z, rtol=0.01)
        np.testing.assert_array_equal(out.years, np.arange(1970, 2011))
        assert out.source_tag == "model:a"


def test_historical_shift_large_sample():
    obs = _gev(3000, 1)
    model = obs + 10.0
    out = qm_historical(_am(model), _am(obs, "observed"), "gev")
    rel = np.abs(out.values / obs - 1)
    assert np.median(rel) < 0.02
    assert np.percentile(rel, 95) < 0.02


@pytest.mark.parametrize("method", ["gev", "kde"])
def test_historical_preserves_rank_order(method, rng):
    model = _gev(50, 3) * 0.8
    obs = _gev(45, 4)
    out = qm_historical(_am(model), _am(obs, "observed"), method)
    np.testing.assert_array_equal(np.argsort(out.values, kind="stable"), np.argsort(model, kind="stable"))


def test_historical_kde_reduces_ks():
    obs = _gev(2000, 5)
    model = _gev(2000, 6) + 10
    before = ks_distance(model, obs)
    out = qm_historical(_am(model), _am(obs, "observed"), "kde")
    after = ks_distance(out.values, obs)
    assert after < before
    assert after < 0.05


def test_ks_distance_matches_scipy(rng):
    a, b = rng.normal(0, 1, 70), rng.normal(0.3, 1.2, 90)
    assert ks_distance(a, b) == pytest.approx(ks_2samp(a, b).statistic, abs=1e-15)


def test_minimum_length():
    with pytest.raises(ContractError):
        qm_historical(_am(_gev(14, 1)), _am(_gev(41, 2), "observed"))


def test_eqm_identity_when_histories_match():
    hist = _gev(41, 7)
    proj = _gev(41, 8) * 1.2
    out = eqm_projected(_am(proj, start=2030), _am(hist), _am(hist, "observed"), "gev")
    np.testing.assert_allclose(out.values, proj, rtol=1e-9)
    out = eqm_projected(_am(proj, start=2030), _am(hist), _am(hist, "observed"), "kde")
    np.testing.assert_allclose(out.values, proj, rtol=1e-9)


def test_eqm_shift_oracle():
    hist = _gev(3000, 9)
    proj = _gev(3000, 10) * 1.1
    out = eqm_projected(_am(proj, start=3000), _am(hist), _am(hist + 5.0, "observed"), "gev")
    diff = out.values - proj
    assert np.median(np.abs(diff - 5.0)) < 0.1
    assert np.percentile(np.abs(diff - 5.0), 95) < 0.25


def test_eqr_scale_oracle_and_identity():
    hist = _gev(3000, 11)
    proj = _gev(3000, 12)
    out = eqr_projected(_am(proj, start=3000), _am(hist), _am(2 * hist, "observed"), "gev")
    ratio = out.values / proj
    assert np.median(np.abs(ratio - 2.0)) < 0.02
    same = eqr_projected(_am(proj, start=3000), _am(hist), _am(hist, "observed"), "gev")
    np.testing.assert_allclose(same.values, proj, rtol=1e-9)


def _adversarial(seed):
    """Projected values far below the training data; additive correction goes negative."""
    rng = np.random.default_rng(seed)
    hist = rng.uniform(30, 60, 41)
    obs = rng.uniform(1, 4, 41)
    proj = np.concatenate([rng.uniform(0.01, 0.5, 10), rng.uniform(30, 60, 31)])
    return _am(proj, start=2030), _am(hist), _am(obs, "observed")


@pytest.mark.parametrize("method", ["gev", "kde"])
def test_eqm_falls_back_to_eqr(method):
    proj, hist, obs = _adversarial(1)
    out = eqm_projected(proj, hist, obs, method)
    assert EQR_FLAG in out.flags
    assert np.all(out.values > 0)
    direct = eqr_projected(proj, hist, obs, method)
    np.testing.assert_array_equal(out.values, direct.values)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["gev", "kde"]), st.floats(0.001, 100), st.floats(0.001, 100))
def test_eqr_always_positive(seed, method, obs_scale, proj_scale):
    rng = np.random.default_rng(seed)
    hist = rng.gamma(2.0, 5.0, 30) + 1e-3
    obs = rng.gamma(0.5, obs_scale, 30) + 1e-6
    proj = rng.gamma(0.7, proj_scale, 30) + 1e-6
    out = eqr_projected(_am(proj, start=2030), _am(hist), _am(obs, "observed"), method)
    assert np.all(out.values > 0) and np.all(np.isfinite(out.values))

