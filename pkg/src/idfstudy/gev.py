"""Generalized extreme value distribution with an optional linear trend in location.

Shape convention: ``xi > 0`` is the heavy (Frechet) tail, ``xi < 0`` the
bounded (Weibull) tail. ``mu(t) = mu0 + mu1 * t`` with t in years from the
fit's time origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gamma as gamma_fn

from .data import AnnualMaxSeries, as_values
from .errors import ContractError, EstimationError

GUMBEL_EPS = 1e-8
EULER_GAMMA = 0.5772156649015329


@dataclass(frozen=True)
class GevParams:
    mu0: float
    sigma: float
    xi: float
    mu1: float = 0.0

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ContractError("sigma must be positive and finite")
        if not (math.isfinite(self.xi) and math.isfinite(self.mu0) and math.isfinite(self.mu1)):
            raise ContractError("GEV parameters must be finite")

    def location(self, t=0.0):
        return self.mu0 + self.mu1 * np.asarray(t, dtype=float)


def gev_cdf(z, p: GevParams, t=0.0):
    """Non-exceedance probability; 0 below and 1 above the support."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ContractError("z must be finite")
    s = (z - p.location(t)) / p.sigma
    if abs(p.xi) < GUMBEL_EPS:
        out = np.exp(-np.exp(-s))
    else:
        xs = p.xi * s
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            inner = np.where(xs > -1, np.exp(-np.log1p(np.maximum(xs, -1.0)) / p.xi), np.inf if p.xi > 0 else 0.0)
        out = np.exp(-inner)
    return out if out.ndim else float(out)


def gev_logpdf(z, mu, sigma, xi):
    """Log density, -inf outside the support. Broadcasts over all arguments."""
    z, mu, sigma, xi = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (z, mu, sigma, xi)))
    s = (z - mu) / sigma
    gumbel = np.abs(xi) < GUMBEL_EPS
    safe_xi = np.where(gumbel, 1.0, xi)
    xs = safe_xi * s
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        logu = np.log1p(np.where(xs > -1, xs, 0.0))
        gev = -np.log(sigma) - (1.0 + 1.0 / safe_xi) * logu - np.exp(-logu / safe_xi)
        gev = np.where(xs > -1, gev, -np.inf)
        gum = -np.log(sigma) - s - np.exp(-s)
    out = np.where(gumbel, gum, gev)
    return out if out.ndim else float(out)


def gev_quantile(prob, mu, sigma, xi):
    """Inverse CDF at non-exceedance probability ``prob``."""
    prob = np.asarray(prob, dtype=float)
    y = -np.log(prob)
    xi = np.asarray(xi, dtype=float)
    gumbel = np.abs(xi) < GUMBEL_EPS
    safe_xi = np.where(gumbel, 1.0, xi)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        # mu - sigma/xi * (1 - y**-xi), written with expm1 to stay accurate for small xi
        q = np.where(gumbel, mu - sigma * np.log(y), mu + sigma * np.expm1(-safe_xi * np.log(y)) / safe_xi)
    return q if q.ndim else float(q)


def time_index(years, time_origin: int) -> np.ndarray:
    return np.asarray(years, dtype=float) - float(time_origin)


def gev_loglik(data: AnnualMaxSeries, p: GevParams, model_kind: str = "stationary",
               time_origin: int | None = None) -> float:
    """Sum of log densities; ``-inf`` if any observation is outside the support.

    ``time_origin`` defaults to the first year of ``data``.
    """
    z = as_values(data)
    if z.size == 0:
        raise ContractError("empty data")
    if model_kind == "stationary":
        mu = p.mu0
    elif model_kind == "nonstationary":
        years = data.years if isinstance(data, AnnualMaxSeries) else np.arange(z.size)
        origin = int(years[0]) if time_origin is None else time_origin
        mu = p.location(time_index(years, origin))
    else:
        raise ContractError(f"unknown model kind {model_kind!r}")
    return float(np.sum(gev_logpdf(z, mu, p.sigma, p.xi)))


def sample_lmoments(x) -> tuple[float, float, float]:
    """l1, l2 and t3 from unbiased probability-weighted moments."""
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    i = np.arange(1, n + 1)
    b0 = x.mean()
    b1 = np.sum((i - 1) / (n - 1) * x) / n
    b2 = np.sum((i - 1) * (i - 2) / ((n - 1) * (n - 2)) * x) / n
    l1 = b0
    l2 = 2 * b1 - b0
    l3 = 6 * b2 - 6 * b1 + b0
    return float(l1), float(l2), float(l3 / l2) if l2 != 0 else float("nan")


def lmoment_fit(data) -> GevParams:
    """Stationary GEV by the method of L-moments (Hosking's approximation for the shape)."""
    x = as_values(data)
    if x.size < 5:
        raise ContractError("L-moment fit needs at least 5 values")
    l1, l2, t3 = sample_lmoments(x)
    if not l2 > 0:
        raise EstimationError("zero L-scale: data are constant")
    c = 2.0 / (3.0 + t3) - math.log(2) / math.log(3)
    k = 7.8590 * c + 2.9554 * c * c
    if abs(k) < 1e-6:
        sigma = l2 / math.log(2)
        mu = l1 - EULER_GAMMA * sigma
        return GevParams(mu, sigma, 0.0)
    g = gamma_fn(1.0 + k)
    sigma = l2 * k / ((1.0 - 2.0 ** (-k)) * g)
    mu = l1 - sigma * (1.0 - g) / k
    return GevParams(float(mu), float(sigma), float(-k))


def gev_random(params: GevParams, size, rng: np.random.Generator, t=0.0) -> np.ndarray:
    """Draws by inversion; ``t`` may be an array of time indices."""
    u = rng.random(size)
    return np.asarray(gev_quantile(u, params.location(t), params.sigma, params.xi), dtype=float)


def gringorten(n: int) -> np.ndarray:
    i = np.arange(1, n + 1)
    return (i - 0.44) / (n + 0.12)
