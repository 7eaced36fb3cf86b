"""Config-driven study workflow.

Per station: calibrate the cascade on observed hourly data, disaggregate each
model's daily series, and extract annual maxima for every duration. Per
station x duration cell: bias-correct the model maxima, form the ensemble
min/median/max, test trends, fit stationary and nonstationary GEV models for
both windows and compare projected with historical return levels.

Every random stream is seeded from a hash of (master seed, station, ...), so
outputs do not depend on worker count or execution order.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bias import KdeModel, eqm_projected, qm_historical, silverman_bandwidth
from .cascade import adjust_disaggregated_extremes, calibrate, disaggregate, interpolate_resolution
from .data import (DURATIONS_H, SECONDS_PER_DAY, AnnualMaxSeries, DepthSeries, EnsembleSet, align_years,
                   apply_wet_threshold, ensemble_stats, extract_annual_max, load_depth_csv)
from .errors import ContractError, IdfError, ValidationError
from .inference import FitRequest, SamplerConfig, aicc, fit_demc_batch, return_level
from .seeding import derive_seed
from .trend import change_z, mann_kendall, percent_change, skill_score, taylor_stats

log = logging.getLogger(__name__)

RETURN_PERIODS_Y = (2, 5, 10, 25, 50)
BIAS_METHODS = ("gev", "kde", "auto")
MIN_WINDOW_YEARS = 30
WET_THRESHOLD_MM = 0.1
DENSITY_POINTS = 256
COMPARISON_CASES = {
    # case: (future model kind, baseline model kind)
    "sta-vs-sta": ("stationary", "stationary"),
    "nonsta-vs-sta": ("nonstationary", "stationary"),
    "nonsta-vs-nonsta": ("nonstationary", "nonstationary"),
}

IDF_HEADER = ["station", "duration_h", "return_period_y", "period", "source_tag", "model_kind",
              "q05", "q50", "q95"]
CHANGE_HEADER = ["station", "duration_h", "return_period_y", "comparison_case", "baseline_q50", "future_q50",
                 "percent_change", "z", "significant_5pct", "significant_10pct"]
SKILL_HEADER = ["station", "duration_h", "series", "method", "normalized_std", "pattern_corr", "centered_rmse",
                "r0", "skill_score"]
TREND_HEADER = ["station", "duration_h", "series", "n", "s_statistic", "variance_s", "z", "p_value",
                "sen_slope_per_decade", "significant_10pct", "correction_factor"]
PARAM_HEADER = ["station", "duration_h", "period", "source_tag", "model_kind", "parameter", "q05", "q50", "q95",
                "gelman_rubin", "acceptance_rate", "iterations", "seed"]
AICC_HEADER = ["station", "duration_h", "period", "source_tag", "model_kind", "n", "aicc"]
BIAS_HEADER = ["station", "duration_h", "member", "method", "eqr_fallback"]


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class ModelInput:
    name: str
    daily: str
    calendar: str = "gregorian"


@dataclass(frozen=True)
class StationInput:
    station_id: str
    obs_hourly: str
    models: tuple
    obs_resolution_s: int = 3600
    obs_calendar: str = "gregorian"
    obs_daily: str | None = None


@dataclass(frozen=True)
class StudyConfig:
    stations: tuple
    baseline_window: tuple = (1970, 2010)
    future_window: tuple = (2030, 2070)
    durations_h: tuple = DURATIONS_H
    return_periods_y: tuple = RETURN_PERIODS_Y
    bias_method: str = "gev"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    master_seed: int = 0
    cascade_steps: int = 5
    workers: int = 1

    def __post_init__(self):
        for name in ("baseline_window", "future_window"):
            w = tuple(int(y) for y in getattr(self, name))
            if len(w) != 2 or w[1] < w[0]:
                raise ContractError(f"{name} must be [first, last]")
            if w[1] - w[0] + 1 < MIN_WINDOW_YEARS:
                raise ContractError(f"{name} spans fewer than {MIN_WINDOW_YEARS} years")
            object.__setattr__(self, name, w)
        b, f = self.baseline_window, self.future_window
        if not (b[1] < f[0] or f[1] < b[0]):
            raise ContractError("baseline and future windows overlap")
        durations = tuple(sorted(int(d) for d in self.durations_h))
        if not durations or any(d not in DURATIONS_H for d in durations):
            raise ContractError(f"durations must be a non-empty subset of {DURATIONS_H}")
        periods = tuple(sorted(float(t) if float(t) != int(t) else int(t) for t in self.return_periods_y))
        if not periods or any(t <= 1 for t in periods):
            raise ContractError("return periods must exceed 1 year")
        if self.bias_method not in BIAS_METHODS:
            raise ContractError(f"bias_method must be one of {BIAS_METHODS}")
        if self.cascade_steps < 1:
            raise ContractError("cascade_steps must be >= 1")
        if self.workers < 1:
            raise ContractError("workers must be >= 1")
        ids = [s.station_id for s in self.stations]
        if not ids or len(set(ids)) != len(ids):
            raise ContractError("station ids must be present and unique")
        object.__setattr__(self, "durations_h", durations)
        object.__setattr__(self, "return_periods_y", periods)
        object.__setattr__(self, "stations", tuple(self.stations))

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str | os.PathLike = ".") -> "StudyConfig":
        """Build from the JSON document; relative file paths resolve against ``base_dir``."""
        base = Path(base_dir)

        def path(p):
            return None if p is None else str((base / p) if not os.path.isabs(p) else Path(p))

        known = {"stations", "baseline_window", "future_window", "durations_h", "return_periods_y",
                 "bias_method", "sampler", "master_seed", "cascade_steps", "workers"}
        extra = set(doc) - known
        if extra:
            raise ValidationError(f"unknown config keys: {sorted(extra)}")
        stations = []
        for st in doc.get("stations", []):
            models = tuple(
                ModelInput(name, path(m["daily"]), m.get("calendar", "gregorian"))
                for name, m in sorted(st.get("models", {}).items())
            )
            if not models:
                raise ValidationError(f"station {st.get('id')!r} has no model inputs")
            stations.append(StationInput(str(st["id"]), path(st["obs_hourly"]), models,
                                         int(st.get("obs_resolution_s", 3600)),
                                         st.get("obs_calendar", "gregorian"), path(st.get("obs_daily"))))
        kw = {k: doc[k] for k in ("baseline_window", "future_window", "durations_h", "return_periods_y",
                                  "bias_method", "master_seed", "cascade_steps", "workers") if k in doc}
        return cls(stations=tuple(stations), sampler=SamplerConfig.from_dict(doc.get("sampler")), **kw)

    @classmethod
    def load(cls, path) -> "StudyConfig":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls.from_dict(doc, Path(path).parent)

    def to_dict(self) -> dict:
        return {
            "stations": [
                {"id": s.station_id, "obs_hourly": s.obs_hourly, "obs_resolution_s": s.obs_resolution_s,
                 "obs_calendar": s.obs_calendar, "obs_daily": s.obs_daily,
                 "models": {m.name: {"daily": m.daily, "calendar": m.calendar} for m in s.models}}
                for s in self.stations
            ],
            "baseline_window": list(self.baseline_window),
            "future_window": list(self.future_window),
            "durations_h": list(self.durations_h),
            "return_periods_y": list(self.return_periods_y),
            "bias_method": self.bias_method,
            "sampler": self.sampler.to_dict(),
            "master_seed": self.master_seed,
            "cascade_steps": self.cascade_steps,
            "workers": self.workers,
        }

    def select(self, stations=None, durations=None, seed=None) -> "StudyConfig":
        """Copy restricted to some stations/durations, optionally with a new master seed."""
        st = self.stations
        if stations:
            wanted = set(stations)
            missing = wanted - {s.station_id for s in st}
            if missing:
                raise ContractError(f"unknown stations: {sorted(missing)}")
            st = tuple(s for s in st if s.station_id in wanted)
        d = self.durations_h if not durations else tuple(durations)
        return StudyConfig(st, self.baseline_window, self.future_window, d, self.return_periods_y,
                           self.bias_method, self.sampler, self.master_seed if seed is None else int(seed),
                           self.cascade_steps, self.workers)


# ---------------------------------------------------------------- station preparation


@dataclass
class StationData:
    station_id: str
    obs_am: dict                     # duration -> AnnualMaxSeries (baseline window)
    model_am: dict                   # duration -> {model name: AnnualMaxSeries}
    cascade: dict


def _model_maxima(fine: DepthSeries, durations, tag: str) -> dict:
    return {d: interpolate_resolution(fine, d * 3600, tag) for d in durations}


def prepare_station(cfg: StudyConfig, st: StationInput) -> StationData:
    """Calibrate, disaggregate and extract annual maxima for one station."""
    b0, b1 = cfg.baseline_window
    hourly = load_depth_csv(st.obs_hourly, st.obs_resolution_s, st.obs_calendar)
    if hourly.station_id and hourly.station_id != st.station_id:
        raise ValidationError(f"{st.obs_hourly}: station id {hourly.station_id!r}, expected {st.station_id!r}")
    params = calibrate(hourly, steps=cfg.cascade_steps)
    obs_am = {d: extract_annual_max(hourly, d).select_years(b0, b1) for d in cfg.durations_h}

    if st.obs_daily:
        # infill missing observed years from disaggregated daily totals
        daily = apply_wet_threshold(load_depth_csv(st.obs_daily, SECONDS_PER_DAY, st.obs_calendar), WET_THRESHOLD_MM)
        fine = disaggregate(daily, params, derive_seed(cfg.master_seed, st.station_id, "obs-daily", "disagg"))
        for d, am in _model_maxima(fine, cfg.durations_h, "observed").items():
            am = am.select_years(b0, b1)
            obs = obs_am[d]
            gaps = np.setdiff1d(am.years, obs.years)
            if gaps.size == 0:
                continue
            filled = adjust_disaggregated_extremes(am, obs)
            take = np.isin(filled.years, gaps)
            years = np.concatenate([obs.years, filled.years[take]])
            vals = np.concatenate([obs.values, filled.values[take]])
            order = np.argsort(years)
            obs_am[d] = obs.replace(years=years[order], values=vals[order], flags=obs.flags | {"infilled"})

    model_am = {d: {} for d in cfg.durations_h}
    for m in st.models:
        daily = load_depth_csv(m.daily, SECONDS_PER_DAY, m.calendar)
        if daily.station_id and daily.station_id != st.station_id:
            raise ValidationError(f"{m.daily}: station id {daily.station_id!r}, expected {st.station_id!r}")
        daily = apply_wet_threshold(daily, WET_THRESHOLD_MM)
        fine = disaggregate(daily, params, derive_seed(cfg.master_seed, st.station_id, m.name, "disagg"))
        for d, am in _model_maxima(fine, cfg.durations_h, f"model:{m.name}").items():
            model_am[d][m.name] = am
    return StationData(st.station_id, obs_am, model_am, params.to_dict())


# ---------------------------------------------------------------- cell analysis


@dataclass
class CellResult:
    station: str
    duration_h: int
    idf: list = field(default_factory=list)
    change: list = field(default_factory=list)
    skill: list = field(default_factory=list)
    trend: list = field(default_factory=list)
    params: list = field(default_factory=list)
    aicc: list = field(default_factory=list)
    bias: list = field(default_factory=list)
    density: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)


def _window(am: AnnualMaxSeries, w) -> AnnualMaxSeries:
    return am.select_years(w[0], w[1])


def _common_years(series: dict) -> dict:
    """Restrict every member to the years all members share."""
    names = sorted(series)
    years, vals = align_years(*(series[n] for n in names))
    return {n: series[n].replace(years=years, values=v) for n, v in zip(names, vals)}


def _skill_row(station, d, label, method, model, obs, ensemble):
    ts = taylor_stats(model, obs, ensemble)
    return [station, d, label, method, ts.normalized_std, ts.pattern_corr, ts.centered_rmse, ts.r0,
            skill_score(ts)]


def _choose_method(cfg, hist, obs, raw_ens) -> str:
    if cfg.bias_method != "auto":
        return cfg.bias_method
    best, best_score = "gev", -np.inf
    for method in ("gev", "kde"):
        try:
            corrected = qm_historical(hist, obs, method)
            score = skill_score(taylor_stats(corrected, obs, raw_ens))
        except IdfError as exc:
            log.info("%s %dh %s: %s correction unusable (%s)", hist.station_id, hist.duration_h,
                     hist.source_tag, method, exc)
            continue
        if score > best_score:
            best, best_score = method, score
    return best


def analyse_cell(cfg: StudyConfig, station: str, d: int, obs_all: AnnualMaxSeries, models: dict) -> CellResult:
    """Everything downstream of annual-maximum extraction for one station x duration."""
    res = CellResult(station, d)
    seed = cfg.master_seed
    obs = _window(obs_all, cfg.baseline_window)
    hist = _common_years({m: _window(am, cfg.baseline_window) for m, am in models.items()})
    proj = _common_years({m: _window(am, cfg.future_window) for m, am in models.items()})
    raw_ens = EnsembleSet(tuple(hist[m] for m in sorted(hist)))

    hist_c, proj_c = {}, {}
    for m in sorted(models):
        method = _choose_method(cfg, hist[m], obs, raw_ens)
        hist_c[m] = qm_historical(hist[m], obs, method)
        proj_c[m] = eqm_projected(proj[m], hist[m], obs, method)
        res.bias.append([station, d, m, method, int("eqr-fallback" in proj_c[m].flags)])
        res.skill.append(_skill_row(station, d, f"model:{m}", "raw", hist[m], obs, raw_ens))
        res.skill.append(_skill_row(station, d, f"model:{m}", method, hist_c[m], obs, raw_ens))

    ens_b = ensemble_stats(EnsembleSet(tuple(hist_c[m] for m in sorted(hist_c))))
    ens_f = ensemble_stats(EnsembleSet(tuple(proj_c[m] for m in sorted(proj_c))))
    res.skill.append(_skill_row(station, d, "mm-med", "corrected", ens_b[1], obs, raw_ens))

    for label, s in (("observed:baseline", obs), ("mm-med:baseline", ens_b[1]), ("mm-med:future", ens_f[1])):
        try:
            t = mann_kendall(s)
        except IdfError as exc:
            res.failures.append({"stage": f"trend {label}", "error": str(exc)})
            continue
        res.trend.append([station, d, label, t.n, t.s_statistic, t.variance_s, t.z, t.p_value,
                          t.sen_slope_per_decade, int(t.significant_10pct), t.correction_factor])

    series = [("baseline", obs)] + [("baseline", s) for s in ens_b] + [("future", s) for s in ens_f]
    requests, keys = [], []
    for period, s in series:
        for kind in ("stationary", "nonstationary"):
            fit_seed = derive_seed(seed, station, d, period, s.source_tag, kind, "fit")
            requests.append(FitRequest(s, kind, fit_seed))
            keys.append((period, s, kind, fit_seed))
    posts = fit_demc_batch(requests, cfg.sampler)

    levels = {}
    for (period, s, kind, fit_seed), post in zip(keys, posts):
        if isinstance(post, Exception):
            res.failures.append({"stage": f"fit {period} {s.source_tag} {kind}", "error": str(post)})
            continue
        diag = post.diagnostics
        for name, q in post.summary()["parameters"].items():
            res.params.append([station, d, period, s.source_tag, kind, name, q["q05"], q["q50"], q["q95"],
                               diag["gelman_rubin"][name], diag["acceptance_rate"], diag["iterations"], fit_seed])
        res.aicc.append([station, d, period, s.source_tag, kind, len(s), aicc(s, post)])
        for T in cfg.return_periods_y:
            est = return_level(post, T)
            levels[(period, s.source_tag, kind, T)] = est
            res.idf.append([station, d, T, period, s.source_tag, kind, est.q05, est.q50, est.q95])

    for case, (fk, bk) in COMPARISON_CASES.items():
        for T in cfg.return_periods_y:
            fut = levels.get(("future", "mm-med", fk, T))
            base = levels.get(("baseline", "observed", bk, T))
            if fut is None or base is None:
                continue
            try:
                z, sig5, sig10 = change_z(fut, base)
            except IdfError as exc:
                res.failures.append({"stage": f"change {case} T={T}", "error": str(exc)})
                continue
            res.change.append([station, d, T, case, base.q50, fut.q50, percent_change(fut.q50, base.q50), z,
                               int(sig5), int(sig10)])

    dens = {"observed:baseline": obs.values}
    dens.update({f"model:{m}:baseline:raw": hist[m].values for m in sorted(hist)})
    dens.update({"mm-med:baseline": ens_b[1].values, "mm-med:future": ens_f[1].values})
    res.density = emit_density_data(dens)
    return res


# ---------------------------------------------------------------- plot-ready density curves


def emit_density_data(series: dict, n_points: int = DENSITY_POINTS) -> dict:
    """Gaussian-kernel density curves of several series on one shared grid.

    Returns ``{"x": grid, name: density, ...}``. Series with fewer than five
    points or without spread are skipped with a warning.
    """
    models = {}
    for name, values in series.items():
        v = np.asarray(getattr(values, "values", values), dtype=float)
        try:
            if v.size < 5:
                raise ContractError("fewer than 5 points")
            models[name] = KdeModel(v, silverman_bandwidth(v))
        except IdfError as exc:
            log.warning("density for %s skipped: %s", name, exc)
    if not models:
        return {}
    lo = min(m.points[0] - 3 * m.bandwidth_h for m in models.values())
    hi = max(m.points[-1] + 3 * m.bandwidth_h for m in models.values())
    grid = np.linspace(lo, hi, n_points)
    out = {"x": grid}
    for name, m in models.items():
        out[name] = m.pdf(grid)
    return out


# ---------------------------------------------------------------- orchestration


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _station_task(cfg: StudyConfig, st: StationInput) -> tuple[list, list, dict]:
    """Prepare one station and analyse all its cells; never raises for data problems."""
    try:
        data = prepare_station(cfg, st)
    except (IdfError, OSError) as exc:
        log.error("station %s failed during preparation: %s", st.station_id, exc)
        fails = [{"station": st.station_id, "duration_h": d, "stage": "prepare", "error": str(exc)}
                 for d in cfg.durations_h]
        return [], fails, {}
    cells, fails = [], []
    for d in cfg.durations_h:
        try:
            cell = analyse_cell(cfg, st.station_id, d, data.obs_am[d], data.model_am[d])
        except (IdfError, FloatingPointError, ValueError) as exc:
            log.error("cell %s %dh failed: %s", st.station_id, d, exc)
            fails.append({"station": st.station_id, "duration_h": d, "stage": "analyse", "error": str(exc)})
            continue
        cells.append(cell)
        fails.extend({"station": st.station_id, "duration_h": d, **f} for f in cell.failures)
    return cells, fails, data.cascade


@dataclass
class RunSummary:
    out_dir: str
    n_cells: int
    failed_cells: list
    files: list

    @property
    def ok(self) -> bool:
        return not self.failed_cells

    @property
    def exit_code(self) -> int:
        return 0 if self.ok else 2


def run_pipeline(cfg: StudyConfig, out_dir) -> RunSummary:
    """Run the whole study and write CSV/JSON artifacts into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.workers > 1 and len(cfg.stations) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(cfg.stations))) as pool:
            results = list(pool.map(_station_task, [cfg] * len(cfg.stations), cfg.stations))
    else:
        results = [_station_task(cfg, st) for st in cfg.stations]

    cells = sorted((c for r in results for c in r[0]), key=lambda c: (c.station, c.duration_h))
    failures = sorted((f for r in results for f in r[1]),
                      key=lambda f: (f["station"], f["duration_h"], f["stage"]))
    cascades = {st.station_id: r[2] for st, r in zip(cfg.stations, results) if r[2]}

    tables = {
        "idf_table.csv": (IDF_HEADER, "idf"),
        "change_report.csv": (CHANGE_HEADER, "change"),
        "skill.csv": (SKILL_HEADER, "skill"),
        "trend.csv": (TREND_HEADER, "trend"),
        "gev_params.csv": (PARAM_HEADER, "params"),
        "aicc.csv": (AICC_HEADER, "aicc"),
        "bias_methods.csv": (BIAS_HEADER, "bias"),
    }
    files = []
    for name, (header, attr) in tables.items():
        _write_rows(out / name, header, [row for c in cells for row in getattr(c, attr)])
        files.append(name)
    density_rows = []
    for c in cells:
        if not c.density:
            continue
        grid = c.density["x"]
        for name in (k for k in c.density if k != "x"):
            for i, (x, y) in enumerate(zip(grid, c.density[name])):
                density_rows.append([c.station, c.duration_h, name, i, x, y])
    _write_rows(out / "density.csv", ["station", "duration_h", "series", "grid_index", "intensity_mm_per_h",
                                      "density"], density_rows)
    files.append("density.csv")
    with open(out / "cascade_params.json", "w", encoding="utf-8") as fh:
        json.dump(cascades, fh, indent=2, sort_keys=True)
        fh.write("\n")
    files.append("cascade_params.json")

    failed_cells = sorted({(f["station"], f["duration_h"]) for f in failures})
    summary = {
        "version": __version__,
        "master_seed": cfg.master_seed,
        "config": cfg.to_dict(),
        "n_cells": len(cfg.stations) * len(cfg.durations_h),
        "failed_cells": [{"station": s, "duration_h": d} for s, d in failed_cells],
        "failures": failures,
        "files": files,
    }
    with open(out / "run_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return RunSummary(str(out), summary["n_cells"], summary["failed_cells"], files + ["run_summary.json"])


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
