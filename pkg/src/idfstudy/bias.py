"""Quantile-mapping bias correction of annual-maximum series.

Historical period: x' = F_obs^-1(F_model(x)).
Projected period, equidistant: x' = x + F_obs^-1(F_proj(x)) - F_model^-1(F_proj(x)).
Projected period, equiratio:   x' = x * F_obs^-1(F_proj(x)) / F_model^-1(F_proj(x)).

Distributions are either stationary GEV fits by L-moments or Gaussian
kernel density estimates with Silverman's bandwidth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .data import AnnualMaxSeries, as_values
from .errors import ContractError, EstimationError
from .gev import gev_cdf, gev_quantile, lmoment_fit

log = logging.getLogger(__name__)

METHODS = ("gev", "kde")
MIN_POINTS = 15
EQR_FLAG = "eqr-fallback"
# quantiles used in the equiratio ratio are floored at this fraction of the training minimum
RATIO_FLOOR = 1e-3


def silverman_bandwidth(points) -> float:
    x = np.asarray(points, dtype=float)
    n = x.size
    if n < 2:
        raise ContractError("bandwidth needs at least 2 points")
    std = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    iqr = (q75 - q25) / 1.34
    spreads = [v for v in (std, iqr) if v > 0]
    if not spreads:
        raise EstimationError("constant sample: bandwidth undefined")
    return 0.9 * min(spreads) * n ** (-0.2)


@dataclass(frozen=True, eq=False)
class KdeModel:
    points: np.ndarray
    bandwidth_h: float

    def __post_init__(self):
        pts = np.sort(np.asarray(self.points, dtype=float))
        if np.unique(pts).size < 2:
            raise EstimationError("KDE needs at least 2 distinct points")
        if not (np.isfinite(self.bandwidth_h) and self.bandwidth_h > 0):
            raise EstimationError("bandwidth must be positive and finite")
        object.__setattr__(self, "points", pts)

    @classmethod
    def fit(cls, points) -> "KdeModel":
        pts = np.asarray(points, dtype=float)
        return cls(pts, silverman_bandwidth(pts))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        u = (x[..., None] - self.points) / self.bandwidth_h
        return np.exp(-0.5 * u * u).sum(axis=-1) / (self.points.size * self.bandwidth_h * np.sqrt(2 * np.pi))


def kde_cdf(m: KdeModel, x):
    x = np.asarray(x, dtype=float)
    out = ndtr((x[..., None] - m.points) / m.bandwidth_h).mean(axis=-1)
    return out if out.ndim else float(out)


def kde_quantile(m: KdeModel, p, tol: float = 1e-10):
    """Inverse of :func:`kde_cdf` by bisection."""
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ContractError("probabilities must lie in (0, 1)")
    lo = np.full(p.shape, m.points[0] - 6 * m.bandwidth_h)
    hi = np.full(p.shape, m.points[-1] + 6 * m.bandwidth_h)
    # the bracket may need widening for extreme p
    while np.any(kde_cdf(m, lo) > p):
        lo = np.where(kde_cdf(m, lo) > p, lo - 6 * m.bandwidth_h, lo)
    while np.any(kde_cdf(m, hi) < p):
        hi = np.where(kde_cdf(m, hi) < p, hi + 6 * m.bandwidth_h, hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = kde_cdf(m, mid) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= tol):
            break
    out = 0.5 * (lo + hi)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class FittedDistribution:
    method: str
    cdf: Callable
    ppf: Callable
    n: int


def fit_distribution(values, method: str) -> FittedDistribution:
    x = as_values(values)
    if method == "gev":
        p = lmoment_fit(x)
        return FittedDistribution("gev", lambda v: gev_cdf(v, p), lambda q: gev_quantile(q, p.mu0, p.sigma, p.xi), x.size)
    if method == "kde":
        m = KdeModel.fit(x)
        return FittedDistribution("kde", lambda v: kde_cdf(m, v), lambda q: kde_quantile(m, q), x.size)
    raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")


def _clamped(prob, n: int) -> np.ndarray:
    lo = 1.0 / (2 * n)
    return np.clip(np.asarray(prob, dtype=float), lo, 1.0 - lo)


def _require(series, label):
    if len(series) < MIN_POINTS:
        raise ContractError(f"{label} needs at least {MIN_POINTS} values, got {len(series)}")


def qm_historical(model_am: AnnualMaxSeries, obs_am: AnnualMaxSeries, method: str = "gev") -> AnnualMaxSeries:
    """Map the model distribution onto the observed one, year by year.

    Model probabilities are clamped to ``[1/(2n), 1 - 1/(2n)]`` before
    inversion. Values whose probability was clamped keep their distance from
    the clamped model quantile, so the map stays monotone and continuous and
    is the identity when both fitted distributions coincide.
    """
    _require(model_am, "model series")
    _require(obs_am, "observed series")
    f_mc = fit_distribution(model_am, method)
    f_oc = fit_distribution(obs_am, method)
    x = model_am.values
    prob = np.asarray(f_mc.cdf(x), dtype=float)
    pc = _clamped(prob, len(x))
    out = np.asarray(f_oc.ppf(pc), dtype=float)
    # beyond the clamped tail probabilities, carry the edge correction as a constant offset
    tail = pc != prob
    if tail.any():
        out[tail] += x[tail] - np.asarray(f_mc.ppf(pc[tail]), dtype=float)
    if np.any(out <= 0) or not np.all(np.isfinite(out)):
        raise EstimationError("quantile mapping produced non-positive intensities")
    return model_am.replace(values=out)


def eqr_projected(model_proj: AnnualMaxSeries, model_hist: AnnualMaxSeries, obs_hist: AnnualMaxSeries,
                  method: str = "gev") -> AnnualMaxSeries:
    """Multiplicative projected-period correction; output is strictly positive.

    Both mapped quantiles are floored at a small fraction of their training
    sample minimum so that neither factor can reach zero.
    """
    for s, label in ((model_proj, "projected model"), (model_hist, "historical model"), (obs_hist, "observed")):
        _require(s, label)
    if np.any(obs_hist.values <= 0) or np.any(model_hist.values <= 0):
        raise ContractError("equiratio mapping needs positive training data")
    f_mp = fit_distribution(model_proj, method)
    f_mc = fit_distribution(model_hist, method)
    f_oc = fit_distribution(obs_hist, method)
    x = model_proj.values
    p = _clamped(f_mp.cdf(x), len(x))
    num = np.maximum(np.asarray(f_oc.ppf(p), dtype=float), RATIO_FLOOR * obs_hist.values.min())
    den = np.maximum(np.asarray(f_mc.ppf(p), dtype=float), RATIO_FLOOR * model_hist.values.min())
    if np.any(den <= 0):
        raise EstimationError("zero model quantile in equiratio denominator")
    return model_proj.replace(values=x * num / den)


def eqm_projected(model_proj: AnnualMaxSeries, model_hist: AnnualMaxSeries, obs_hist: AnnualMaxSeries,
                  method: str = "gev") -> AnnualMaxSeries:
    """Additive projected-period correction.

    If any corrected value is not positive the whole series is corrected with
    :func:`eqr_projected` instead and flagged ``eqr-fallback``.
    """
    for s, label in ((model_proj, "projected model"), (model_hist, "historical model"), (obs_hist, "observed")):
        _require(s, label)
    f_mp = fit_distribution(model_proj, method)
    f_mc = fit_distribution(model_hist, method)
    f_oc = fit_distribution(obs_hist, method)
    x = model_proj.values
    p = _clamped(f_mp.cdf(x), len(x))
    out = x + np.asarray(f_oc.ppf(p), dtype=float) - np.asarray(f_mc.ppf(p), dtype=float)
    if np.all(out > 0) and np.all(np.isfinite(out)):
        return AnnualMaxSeries(model_proj.station_id, model_proj.duration_h, model_proj.years, out,
                               model_proj.source_tag, model_proj.flags)
    log.info("%s %dh %s: EQM gave non-positive values, using equiratio mapping",
             model_proj.station_id, model_proj.duration_h, model_proj.source_tag)
    corrected = eqr_projected(model_proj, model_hist, obs_hist, method)
    return corrected.replace(flags=corrected.flags | {EQR_FLAG})


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    a = np.sort(as_values(a))
    b = np.sort(as_values(b))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))
