"""Trend tests, model-agreement statistics and change significance.

Mann-Kendall uses the tie-corrected variance inflated by the Hamed-Rao
factor, computed from rank autocorrelations of the Sen-detrended series
that are significant at 5% (two-sided).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

from .data import AnnualMaxSeries, EnsembleSet, align_years
from .errors import ContractError
from .inference import ReturnLevelEstimate

MK_MIN_POINTS = 10
MK_ALPHA = 0.10
ACF_ALPHA = 0.05
Z_5PCT = 1.96
Z_10PCT = 1.64
CI_DIVISOR = 2 * 1.645
R0_FLOOR = 1e-12


def _years_values(series, years=None) -> tuple[np.ndarray, np.ndarray]:
    """Present (year, value) pairs sorted by year; NaN values are gaps."""
    if isinstance(series, AnnualMaxSeries):
        t, y = series.years, series.values
    else:
        y = np.asarray(series, dtype=float).ravel()
        t = np.arange(y.size) if years is None else np.asarray(years)
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.shape != y.shape:
        raise ContractError("years and values differ in length")
    keep = np.isfinite(y)
    order = np.argsort(t[keep], kind="stable")
    return t[keep][order], y[keep][order]


@dataclass(frozen=True)
class TrendResult:
    n: int
    s_statistic: int
    variance_s: float
    z: float
    p_value: float
    sen_slope_per_decade: float
    significant_10pct: bool
    correction_factor: float = 1.0


def mk_statistic(y) -> int:
    y = np.asarray(y, dtype=float)
    d = np.sign(y[None, :] - y[:, None])
    return int(np.triu(d, k=1).sum())


def mk_variance(y) -> float:
    """Variance of S under no trend, corrected for tied groups."""
    y = np.asarray(y, dtype=float)
    n = y.size
    _, counts = np.unique(y, return_counts=True)
    ties = np.sum(counts * (counts - 1) * (2 * counts + 5))
    return (n * (n - 1) * (2 * n + 5) - ties) / 18.0


def rank_acf(x, max_lag: int) -> np.ndarray:
    """Autocorrelation of ranks at lags 1..max_lag; zeros if ranks are constant."""
    r = rankdata(x)
    r = r - r.mean()
    den = np.sum(r * r)
    if den == 0:
        return np.zeros(max_lag)
    return np.array([np.sum(r[:-k] * r[k:]) / den for k in range(1, max_lag + 1)])


def hamed_rao_factor(y, t=None, alpha: float = ACF_ALPHA) -> float:
    """Variance inflation n/n_s* from significant rank autocorrelations."""
    y = np.asarray(y, dtype=float)
    n = y.size
    t = np.arange(n, dtype=float) if t is None else np.asarray(t, dtype=float)
    slope = theil_sen(y, t)
    resid = y - slope * t
    lags = np.arange(1, n - 1)
    rho = rank_acf(resid, n - 2)
    bound = norm.ppf(1 - alpha / 2) / math.sqrt(n)
    sig = np.abs(rho) > bound
    if not sig.any():
        return 1.0
    m = n - lags
    w = m * (m - 1) * (m - 2)
    return 1.0 + 2.0 / (n * (n - 1) * (n - 2)) * float(np.sum(w[sig] * rho[sig]))


def mann_kendall(series, years=None, autocorrelation: bool = True) -> TrendResult:
    """Two-sided Mann-Kendall test with ties and Hamed-Rao corrections."""
    t, y = _years_values(series, years)
    n = y.size
    if n < MK_MIN_POINTS:
        raise ContractError(f"Mann-Kendall needs at least {MK_MIN_POINTS} values, got {n}")
    s = mk_statistic(y)
    var = mk_variance(y)
    factor = hamed_rao_factor(y, t) if autocorrelation else 1.0
    # negative sums can drive the factor to zero or below; keep the uncorrected variance then
    if factor <= 0:
        factor = 1.0
    var_c = var * factor
    if s == 0 or var_c <= 0:
        z = 0.0
    else:
        z = (s - np.sign(s)) / math.sqrt(var_c)
    p = float(min(1.0, 2.0 * norm.sf(abs(z))))
    slope = theil_sen(y, t)
    return TrendResult(n, s, float(var_c), float(z), p, 10.0 * slope, p < MK_ALPHA, float(factor))


def theil_sen(series, years=None) -> float:
    """Median of pairwise slopes, per unit of time."""
    t, y = _years_values(series, years)
    if y.size < 2:
        raise ContractError("Theil-Sen needs at least 2 values")
    i, j = np.triu_indices(y.size, k=1)
    dt = t[j] - t[i]
    ok = dt != 0
    if not ok.any():
        raise ContractError("Theil-Sen needs at least 2 distinct years")
    return float(np.median((y[j][ok] - y[i][ok]) / dt[ok]))


# ---------------------------------------------------------------- model agreement


@dataclass(frozen=True)
class TaylorStats:
    normalized_std: float
    pattern_corr: float
    centered_rmse: float
    r0: float
    std_model: float = float("nan")
    std_obs: float = float("nan")


def _corr(a, b) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.sum(a * a) * np.sum(b * b)))
    return float(np.clip(np.sum(a * b) / den, -1.0, 1.0)) if den > 0 else 0.0


def taylor_stats(model: AnnualMaxSeries, obs: AnnualMaxSeries, ensemble: EnsembleSet | None = None) -> TaylorStats:
    """Centered statistics on common years; r0 is the best member-vs-obs correlation."""
    years, (f, o) = align_years(model, obs)
    if years.size < 3:
        raise ContractError("Taylor statistics need at least 3 common years")
    fa, oa = f - f.mean(), o - o.mean()
    sf, so = float(np.std(f)), float(np.std(o))
    if so == 0:
        raise ContractError("observed series has zero variance")
    r = _corr(f, o)
    crmse = math.sqrt(float(np.mean((fa - oa) ** 2)))
    members = ensemble.members if ensemble is not None else [model]
    if not members:
        raise ContractError("empty ensemble")
    rs = []
    for m in members:
        yy, (mv, ov) = align_years(m, obs)
        if yy.size >= 3:
            rs.append(_corr(mv, ov))
    if not rs:
        raise ContractError("no ensemble member overlaps the observations by 3 years")
    r0 = float(np.clip(max(rs), R0_FLOOR, 1.0))
    return TaylorStats(sf / so, r, crmse, r0, sf, so)


def skill_score(ts: TaylorStats) -> float:
    """S = 4(1+R) / ((s + 1/s)^2 (1+R0)) with s the normalized standard deviation."""
    s = ts.normalized_std
    if not s > 0 or not math.isfinite(s):
        raise ContractError("normalized standard deviation must be positive")
    if not ts.r0 > -1:
        raise ContractError("r0 must exceed -1")
    return 4.0 * (1.0 + ts.pattern_corr) / ((s + 1.0 / s) ** 2 * (1.0 + ts.r0))


# ---------------------------------------------------------------- change significance


def ci_variance(est: ReturnLevelEstimate) -> float:
    """Variance implied by a 90% interval under approximate normality."""
    return ((est.q95 - est.q05) / CI_DIVISOR) ** 2


def z_from_variances(q_future: float, q_baseline: float, var_future: float, var_baseline: float):
    pooled = 0.5 * (var_future + var_baseline)
    if not pooled > 0:
        raise ContractError("combined variance is zero")
    z = (q_future - q_baseline) / math.sqrt(pooled)
    return z, abs(z) > Z_5PCT, abs(z) > Z_10PCT


def change_z(future: ReturnLevelEstimate, baseline: ReturnLevelEstimate) -> tuple[float, bool, bool]:
    """(z, significant at 5%, significant at 10%)."""
    return z_from_variances(future.q50, baseline.q50, ci_variance(future), ci_variance(baseline))


def relative_change(a, baseline):
    b = np.asarray(baseline, dtype=float)
    if np.any(b == 0):
        raise ContractError("baseline must be non-zero")
    out = (np.asarray(a, dtype=float) - b) / b
    return out if out.ndim else float(out)


def percent_change(a, baseline):
    return 100.0 * relative_change(a, baseline)
