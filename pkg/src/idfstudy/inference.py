"""Bayesian GEV estimation with a differential-evolution Markov chain sampler.

The population is split into two halves that are updated in turn. A chain in
one half proposes ``x + gamma * (x_a - x_b) + eps`` with ``x_a``, ``x_b``
drawn from the other half, which is held fixed during the update, so the
proposal is symmetric and each half-step is an exact Metropolis update.
That lets a whole half be evaluated in one vectorised likelihood call.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import AnnualMaxSeries
from .errors import ContractError, ConvergenceError, EstimationError
from .gev import GUMBEL_EPS, GevParams, gev_quantile, gringorten, lmoment_fit, time_index

log = logging.getLogger(__name__)

MODEL_KINDS = ("stationary", "nonstationary")
PARAM_NAMES = ("mu0", "mu1", "sigma", "xi")
MIN_POINTS = 15


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 10
    iterations: int = 5000
    burn_in: float = 0.5
    thin: int = 1
    max_iterations: int = 20000
    gamma_one_every: int = 10
    jitter: float = 1e-4
    rhat_threshold: float = 1.1
    xi_bounds: tuple = (-0.5, 0.5)
    xi_prior: str = "flat"

    def __post_init__(self):
        if self.n_chains < 4 or self.n_chains % 2:
            raise ContractError("n_chains must be an even number >= 4")
        if self.iterations < 2 or self.max_iterations < self.iterations:
            raise ContractError("need 2 <= iterations <= max_iterations")
        if not 0 <= self.burn_in < 1:
            raise ContractError("burn_in must be a fraction in [0, 1)")
        if self.thin < 1:
            raise ContractError("thin must be >= 1")
        kept = self.n_chains * int(self.iterations * (1 - self.burn_in)) // self.thin
        if kept < 1000:
            raise ContractError(f"configuration keeps only {kept} samples; at least 1000 required")
        if self.xi_prior not in ("flat", "geophysical"):
            raise ContractError("xi_prior must be 'flat' or 'geophysical'")
        lo, hi = self.xi_bounds
        if not lo < hi:
            raise ContractError("xi_bounds must be increasing")
        object.__setattr__(self, "xi_bounds", (float(lo), float(hi)))

    @classmethod
    def from_dict(cls, doc: dict | None) -> "SamplerConfig":
        doc = dict(doc or {})
        if "xi_bounds" in doc:
            doc["xi_bounds"] = tuple(doc["xi_bounds"])
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["xi_bounds"] = list(self.xi_bounds)
        return d


@dataclass(frozen=True)
class ReturnLevelEstimate:
    return_period_y: float
    q05: float
    q50: float
    q95: float


@dataclass(frozen=True, eq=False)
class GevPosterior:
    """Posterior draws, one row per sample, columns ``mu0, mu1, sigma, xi``."""

    samples: np.ndarray
    model_kind: str
    time_origin: int
    eval_t: float = 0.0
    diagnostics: dict = field(default_factory=dict)
    seed: int | None = None
    config: SamplerConfig | None = None
    prior_box: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ContractError(f"unknown model kind {self.model_kind!r}")
        s = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if s.shape[1] != 4 or s.shape[0] < 1:
            raise ContractError("samples must have shape (n, 4)")
        if np.any(s[:, 2] <= 0) or not np.all(np.isfinite(s)):
            raise ContractError("posterior samples violate parameter invariants")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @classmethod
    def point(cls, p: GevParams, model_kind: str = "stationary", time_origin: int = 0, eval_t: float = 0.0):
        return cls(np.array([[p.mu0, p.mu1, p.sigma, p.xi]]), model_kind, time_origin, eval_t)

    def quantiles(self, q=(5, 50, 95)) -> dict[str, np.ndarray]:
        return {name: np.percentile(self.samples[:, j], q) for j, name in enumerate(PARAM_NAMES)}

    def median_params(self) -> GevParams:
        med = np.median(self.samples, axis=0)
        return GevParams(mu0=med[0], sigma=med[2], xi=med[3], mu1=med[1])

    def summary(self) -> dict:
        names = PARAM_NAMES if self.model_kind == "nonstationary" else ("mu0", "sigma", "xi")
        qs = self.quantiles()
        return {
            "model_kind": self.model_kind,
            "time_origin": self.time_origin,
            "eval_t": self.eval_t,
            "n_samples": int(self.samples.shape[0]),
            "parameters": {n: {"q05": float(qs[n][0]), "q50": float(qs[n][1]), "q95": float(qs[n][2])}
                           for n in names},
            "diagnostics": self.diagnostics,
            "seed": self.seed,
            "config": self.config.to_dict() if self.config else None,
        }


# ---------------------------------------------------------------- priors


def prior_box(values: np.ndarray, years: np.ndarray, model_kind: str, xi_bounds=(-0.5, 0.5)) -> dict:
    """Uniform prior bounds derived from the data scale."""
    lo, hi = float(values.min()), float(values.max())
    rng_ = hi - lo
    std = float(np.std(values, ddof=1))
    box = {
        "mu0": (lo - 3 * rng_, hi + 3 * rng_),
        "mu1": (0.0, 0.0),
        "sigma": (0.0, 10 * std),
        "xi": tuple(xi_bounds),
    }
    if model_kind == "nonstationary":
        length = float(years.max() - years.min() + 1)
        slope = 3 * std / length
        box["mu1"] = (-slope, slope)
    return box


# ---------------------------------------------------------------- sampler


@dataclass
class FitRequest:
    data: AnnualMaxSeries
    model_kind: str = "stationary"
    seed: int = 0
    time_origin: int | None = None
    eval_t: float | None = None


class _Problem:
    """State of one fit while it is being sampled."""

    def __init__(self, req: FitRequest, cfg: SamplerConfig):
        if req.model_kind not in MODEL_KINDS:
            raise ContractError(f"unknown model kind {req.model_kind!r}")
        z = np.asarray(req.data.values, dtype=float)
        years = np.asarray(req.data.years)
        if z.size < MIN_POINTS:
            raise ContractError(f"need at least {MIN_POINTS} annual maxima, got {z.size}")
        if np.ptp(z) == 0:
            raise EstimationError("all annual maxima are equal")
        self.req = req
        self.z = z
        self.origin = int(years[0]) if req.time_origin is None else int(req.time_origin)
        self.t = time_index(years, self.origin)
        self.eval_t = float(years[-1] - self.origin) if req.eval_t is None else float(req.eval_t)
        self.box = prior_box(z, years, req.model_kind, cfg.xi_bounds)
        self.lo = np.array([self.box[n][0] for n in PARAM_NAMES])
        self.hi = np.array([self.box[n][1] for n in PARAM_NAMES])
        self.free = np.array([True, req.model_kind == "nonstationary", True, True])
        self.width = self.hi - self.lo
        self.rng = np.random.default_rng(req.seed)
        self.history: list[np.ndarray] = []
        self.accepted = 0
        target = _BatchTarget([self], cfg)
        self.states = _initial_states(z, self.t, req.model_kind, lambda th: target(th[None])[0],
                                      cfg.n_chains, self.rng, self.box)
        self.logp = target(self.states[None])[0]


class _BatchTarget:
    """Log posterior for ``theta`` of shape (fits, rows, 4); data padded to a common length."""

    def __init__(self, problems, cfg: SamplerConfig):
        n_max = max(p.z.size for p in problems)
        f = len(problems)
        self.z = np.zeros((f, 1, n_max))
        self.t = np.zeros((f, 1, n_max))
        self.mask = np.zeros((f, 1, n_max), dtype=bool)
        for i, p in enumerate(problems):
            self.z[i, 0, :p.z.size] = p.z
            self.t[i, 0, :p.z.size] = p.t
            self.mask[i, 0, :p.z.size] = True
        self.n = np.array([p.z.size for p in problems], dtype=float)[:, None]
        self.n_pad = n_max - self.n
        self.lo = np.stack([p.lo for p in problems])[:, None, :]
        self.hi = np.stack([p.hi for p in problems])[:, None, :]
        self.xi_prior = cfg.xi_prior
        self.xi_bounds = cfg.xi_bounds

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        inside = np.all((theta >= self.lo) & (theta <= self.hi), axis=-1) & (theta[..., 2] > 0)
        sigma = np.where(inside, theta[..., 2], 1.0)
        xi = theta[..., 3]
        mu = theta[..., 0:1] + theta[..., 1:2] * self.t
        s = (self.z - mu) / sigma[..., None]
        gumbel = np.abs(xi) < GUMBEL_EPS
        safe_xi = np.where(gumbel, 1.0, xi)
        u = np.where(self.mask, 1.0 + safe_xi[..., None] * s, 1.0)
        bad = np.any(u <= 0, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            logu = np.log(np.where(u > 0, u, 1.0))
            ll = (-self.n * np.log(sigma) - (1.0 + 1.0 / safe_xi) * logu.sum(axis=-1)
                  - (np.exp(-logu / safe_xi[..., None]).sum(axis=-1) - self.n_pad))
            if gumbel.any():
                sm = np.where(self.mask, s, 0.0)
                gum = (-self.n * np.log(sigma) - sm.sum(axis=-1)
                       - (np.exp(-sm).sum(axis=-1) - self.n_pad))
                ll = np.where(gumbel, gum, ll)
                bad = bad & ~gumbel
        ll = np.where(inside & ~bad, ll, -np.inf)
        if self.xi_prior == "geophysical":
            # Beta(6, 9) on (hi - xi) / (hi - lo): mean xi = 0.1 for the default box
            a, b = self.xi_bounds
            x = np.clip((b - xi) / (b - a), 1e-300, 1.0)
            ll = ll + 5.0 * np.log(x) + 8.0 * np.log(np.clip(1.0 - x, 1e-300, 1.0))
        return ll


def gelman_rubin(chains: np.ndarray) -> np.ndarray:
    """Potential scale reduction per parameter; ``chains`` is (iter, chain, param)."""
    n = chains.shape[0]
    means = chains.mean(axis=0)
    w = chains.var(axis=0, ddof=1).mean(axis=0)
    b = n * means.var(axis=0, ddof=1)
    var_hat = (n - 1) / n * w + b / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_hat / w)
    return np.where(w > 0, r, 1.0)


def _initial_states(z, t, model_kind, target, n_chains, rng, box):
    """L-moment centre plus jitter; every chain starts inside the support."""
    lm = lmoment_fit(z)
    xi0 = float(np.clip(lm.xi, box["xi"][0] * 0.9, box["xi"][1] * 0.9))
    slope = 0.0
    mu0 = lm.mu0
    if model_kind == "nonstationary":
        slope = float(np.polyfit(t, z, 1)[0])
        slope = float(np.clip(slope, box["mu1"][0] * 0.9, box["mu1"][1] * 0.9))
        mu0 = lm.mu0 - slope * float(t.mean())
    center = np.array([mu0, slope, lm.sigma, xi0])
    for _ in range(60):
        if np.isfinite(target(center[None, :])[0]):
            break
        center[3] *= 0.5
        center[2] *= 1.1
    else:
        raise EstimationError("could not find a starting point inside the GEV support")
    scale = np.array([0.1 * center[2], 0.0, 0.05 * center[2], 0.02])
    if model_kind == "nonstationary":
        scale[1] = 0.1 * center[2] / max(float(np.ptp(t)), 1.0)
    states = np.empty((n_chains, 4))
    for c in range(n_chains):
        for _ in range(200):
            cand = center + scale * rng.standard_normal(4)
            if np.isfinite(target(cand[None, :])[0]):
                break
        else:
            cand = center.copy()
        states[c] = cand
    return states


def _run_block(problems, n_iter: int, cfg: SamplerConfig) -> None:
    f = len(problems)
    n_chains = cfg.n_chains
    half = n_chains // 2
    target = _BatchTarget(problems, cfg)
    states = np.stack([p.states for p in problems])
    logp = np.stack([p.logp for p in problems])
    start = len(problems[0].history)
    # every fit draws its block of random numbers from its own stream, in a fixed order
    pick_a, pick_b, eps, log_u = [], [], [], []
    for p in problems:
        a = p.rng.integers(0, half, size=(n_iter, 2, half))
        pick_a.append(a)
        pick_b.append((a + p.rng.integers(1, half, size=(n_iter, 2, half))) % half)
        e = (p.rng.random((n_iter, 2, half, 4)) - 0.5) * (2.0 * cfg.jitter * p.width)
        e[..., ~p.free] = 0.0
        eps.append(e)
        log_u.append(np.log(p.rng.random((n_iter, 2, half))))
    pick_a, pick_b, eps, log_u = (np.stack(x, axis=1) for x in (pick_a, pick_b, eps, log_u))
    gamma_default = np.array([2.38 / math.sqrt(2 * int(p.free.sum())) for p in problems])[:, None, None]
    fidx = np.arange(f)[:, None]
    halves = (slice(0, half), slice(half, n_chains))
    hist = np.empty((n_iter, f, n_chains, 4))
    accepted = np.zeros(f, dtype=np.int64)
    for i in range(n_iter):
        gamma = 1.0 if (start + i + 1) % cfg.gamma_one_every == 0 else gamma_default
        for g in range(2):
            cur, oth = halves[g], halves[1 - g]
            other = states[:, oth]
            prop = (states[:, cur] + gamma * (other[fidx, pick_a[i, :, g]] - other[fidx, pick_b[i, :, g]])
                    + eps[i, :, g])
            lp = target(prop)
            acc = log_u[i, :, g] < lp - logp[:, cur]
            states[:, cur] = np.where(acc[..., None], prop, states[:, cur])
            logp[:, cur] = np.where(acc, lp, logp[:, cur])
            accepted += acc.sum(axis=1)
        hist[i] = states
    for j, p in enumerate(problems):
        p.states = states[j].copy()
        p.logp = logp[j].copy()
        p.history.append(hist[:, j].copy())
        p.accepted += int(accepted[j])


def fit_demc_batch(requests, config: SamplerConfig | None = None) -> list:
    """Run several independent fits in lock-step.

    Returns one entry per request: a :class:`GevPosterior` or the exception
    that stopped that fit. Each fit uses its own seeded stream.
    """
    cfg = config or SamplerConfig()
    results: list = [None] * len(requests)
    active = []
    for i, req in enumerate(requests):
        try:
            active.append((i, _Problem(req, cfg)))
        except (ContractError, EstimationError) as exc:
            results[i] = exc
    total = 0
    n_iter = cfg.iterations
    while active:
        _run_block([p for _, p in active], n_iter, cfg)
        total += n_iter
        still = []
        for i, p in active:
            chains = np.concatenate(p.history)
            kept = chains[int(total * cfg.burn_in)::cfg.thin]
            rhat = gelman_rubin(kept[:, :, p.free])
            diag = _diagnostics(rhat, p.free, p.accepted, total, cfg.n_chains)
            if np.all(rhat <= cfg.rhat_threshold):
                results[i] = GevPosterior(kept.reshape(-1, 4), p.req.model_kind, p.origin, p.eval_t, diag,
                                          p.req.seed, cfg, {k: list(v) for k, v in p.box.items()})
            elif total >= cfg.max_iterations:
                results[i] = ConvergenceError(
                    f"Gelman-Rubin {np.max(rhat):.3f} > {cfg.rhat_threshold} after {total} iterations", diag)
            else:
                log.debug("R-hat %s after %d iterations; extending", np.round(rhat, 3), total)
                still.append((i, p))
        active = still
        n_iter = min(cfg.iterations, cfg.max_iterations - total)
    return results


def fit_demc(data: AnnualMaxSeries, model_kind: str = "stationary", config: SamplerConfig | None = None,
             seed: int = 0, time_origin: int | None = None, eval_t: float | None = None) -> GevPosterior:
    """Posterior sample of GEV parameters under flat box priors.

    For nonstationary fits t = year - ``time_origin`` (default: first year of
    ``data``); return levels default to the last year of the data.
    """
    out = fit_demc_batch([FitRequest(data, model_kind, seed, time_origin, eval_t)], config)[0]
    if isinstance(out, Exception):
        raise out
    return out


def _diagnostics(rhat, free, accepted, total, n_chains) -> dict:
    names = [n for n, f in zip(PARAM_NAMES, free) if f]
    return {
        "gelman_rubin": {n: float(r) for n, r in zip(names, rhat)},
        "acceptance_rate": accepted / float(total * n_chains),
        "iterations": int(total),
    }


# ---------------------------------------------------------------- derived quantities


def return_level(post: GevPosterior, T: float, eval_t: float | None = None) -> ReturnLevelEstimate:
    """T-year intensity quantiles (5/50/95) over the posterior sample."""
    if not T > 1:
        raise ContractError("return period must exceed 1 year")
    s = post.samples
    if post.model_kind == "stationary":
        mu = s[:, 0]
    else:
        t = post.eval_t if eval_t is None else eval_t
        mu = s[:, 0] + s[:, 1] * t
    q = gev_quantile(1.0 - 1.0 / T, mu, s[:, 2], s[:, 3])
    q05, q50, q95 = np.percentile(np.atleast_1d(q), [5, 50, 95])
    return ReturnLevelEstimate(float(T), float(q05), float(q50), float(q95))


def aicc(data: AnnualMaxSeries, post: GevPosterior) -> float:
    """Small-sample AIC from quantile residuals against Gringorten positions.

    For nonstationary models the fitted trend ``mu1 * t`` is removed from
    each observation first, so the sorted residual sample is compared with
    quantiles of the GEV at location ``mu0``.
    """
    m = 3 if post.model_kind == "stationary" else 4
    z = np.asarray(data.values, dtype=float)
    n = z.size
    if n <= m + 1:
        raise ContractError(f"AICc needs more than {m + 1} observations")
    med = post.median_params()
    if post.model_kind == "nonstationary":
        z = z - med.mu1 * time_index(data.years, post.time_origin)
    model_q = gev_quantile(gringorten(n), med.mu0, med.sigma, med.xi)
    sse = max(float(np.sum((np.sort(z) - model_q) ** 2)), 1e-12)
    aic = n * math.log(sse / n) + 2 * m
    return aic + small_sample_penalty(m, n)


def small_sample_penalty(m: int, n: int) -> float:
    return 2.0 * m * (m + 1) / (n - m - 1)
