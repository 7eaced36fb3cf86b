"""Synthetic station and model inputs for pipeline tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from idfstudy.data import DepthSeries, days_in_year, write_depth_csv


def daily_rain(years, rng, wet_prob=0.35, shape=0.7, scale=9.0):
    """Daily depths (mm) for whole years: Bernoulli occurrence with gamma amounts."""
    ys, ds, vs = [], [], []
    for y in years:
        n = int(days_in_year(y))
        wet = rng.random(n) < wet_prob
        v = np.where(wet, rng.gamma(shape, scale, n), 0.0)
        ys.append(np.full(n, y))
        ds.append(np.arange(1, n + 1))
        vs.append(v)
    return np.concatenate(ys), np.concatenate(ds), np.concatenate(vs)


def hourly_from_daily(years, days, depths, rng):
    """Spread each wet day over a random storm of 1 to 12 consecutive hours."""
    n = depths.size
    grid = np.zeros((n, 24))
    length = rng.integers(1, 13, n)
    start = rng.integers(0, 24 - length + 1)
    w = rng.gamma(0.8, 1.0, (n, 24))
    hours = np.arange(24)
    inside = (hours >= start[:, None]) & (hours < (start + length)[:, None])
    w = np.where(inside, w, 0.0)
    w /= w.sum(axis=1, keepdims=True)
    grid = w * depths[:, None]
    return DepthSeries("", 3600, np.repeat(years, 24), np.repeat(days, 24), np.tile(hours, n), grid.ravel())


def write_station(root: Path, station: str, seed: int, baseline=(1970, 2010), last_year=2070,
                  models=(("rcm-a", 0.85), ("rcm-b", 1.0), ("rcm-c", 1.2)), future_factor=1.0,
                  identical=False) -> dict:
    """Write observed hourly and model daily CSVs; return the station's config entry.

    ``future_factor`` scales model depths after the baseline window.
    ``identical`` makes every model a copy of the observed daily totals,
    repeated into the future window.
    """
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    b_years = np.arange(baseline[0], baseline[1] + 1)
    y, d, v = daily_rain(b_years, rng)
    hourly = hourly_from_daily(y, d, v, rng)
    hourly = DepthSeries(station, 3600, hourly.years, hourly.days, hourly.boxes, hourly.depths)
    obs_path = root / f"{station}_obs_hourly.csv"
    write_depth_csv(obs_path, hourly)
    entry = {"id": station, "obs_hourly": obs_path.name, "models": {}}
    all_years = np.arange(baseline[0], last_year + 1)
    for name, factor in models:
        if identical:
            daily = hourly.daily_totals()
            # copy baseline years into later years day by day (365-day years keep calendars simple)
            my, md, mv = [], [], []
            for yr in all_years:
                src = baseline[0] + (yr - baseline[0]) % len(b_years)
                sel = daily.years == src
                n = int(days_in_year(yr))
                vals = daily.depths[sel][:n]
                vals = np.pad(vals, (0, n - vals.size))
                my.append(np.full(n, yr))
                md.append(np.arange(1, n + 1))
                mv.append(vals)
            my, md, mv = np.concatenate(my), np.concatenate(md), np.concatenate(mv)
        else:
            my, md, mv = daily_rain(all_years, rng, scale=9.0 * factor)
        mv = np.where(my > baseline[1], mv * future_factor, mv)
        path = root / f"{station}_{name}_daily.csv"
        write_depth_csv(path, DepthSeries(station, 86400, my, md, np.zeros_like(my), mv))
        entry["models"][name] = {"daily": path.name}
    return entry


def write_study(root: Path, n_stations: int, seed: int = 1, sampler=None, **kw) -> Path:
    """Write a complete study (inputs and config JSON); return the config path."""
    root = Path(root)
    stations = [write_station(root, f"ST{i:02d}", seed * 1000 + i, **kw) for i in range(n_stations)]
    cfg = {"stations": stations, "master_seed": seed, "bias_method": "gev"}
    if sampler:
        cfg["sampler"] = sampler
    path = root / "study.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path
