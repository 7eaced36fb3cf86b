"""Micro-canonical multiplicative random cascade for temporal disaggregation.

Each wet box is split into two halves of equal duration. With probability
P01 one half receives the whole volume; otherwise the first half receives a
fraction W drawn from a symmetric beta distribution and the second half the
remainder, so volume is conserved exactly at every branching. P01 depends on
the cascade step, the position of the box in the wet/dry sequence and its
volume tercile.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import SECONDS_PER_DAY, AnnualMaxSeries, DepthSeries, annual_maxima, DURATIONS_H
from .errors import ContractError, EstimationError
from .seeding import derive_key

log = logging.getLogger(__name__)

POSITIONS = ("starting", "enclosed", "ending", "isolated")
STARTING, ENCLOSED, ENDING, ISOLATED = range(4)
VOLUME_CLASSES = (1, 2, 3)
BETA_SHAPE_FLOOR = 0.05
BETA_SHAPE_CAP = 1e6
MIN_CALIBRATION_YEARS = 35


@dataclass(frozen=True, eq=False)
class CascadeParams:
    """Calibrated cascade generator.

    ``p01_by_cell[k, pos, vc - 1]`` is the probability that a wet box at step
    ``k + 1`` (parent resolution ``86400 / 2**k`` s) puts all its volume into
    one half. ``observed_steps`` marks which steps were estimated from data;
    the others come from the fitted scaling law.
    """

    steps: int
    p01_by_cell: np.ndarray
    p01_scaling: tuple[float, float] = (0.0, 0.0)
    px_regression: tuple[float, float] = (0.0, 0.0)
    beta_shape: float = 1.0
    half_split_prob: float = 0.5
    observed_steps: tuple = ()
    cell_counts: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("steps must be at least 1")
        table = np.array(self.p01_by_cell, dtype=float)
        if table.shape != (self.steps, len(POSITIONS), len(VOLUME_CLASSES)):
            raise ContractError(f"p01 table must have shape ({self.steps}, 4, 3), got {table.shape}")
        if np.any(~np.isfinite(table)) or np.any(table < 0) or np.any(table > 1):
            raise ContractError("every P01 must lie in [0, 1]")
        table.setflags(write=False)
        object.__setattr__(self, "p01_by_cell", table)
        if not (self.beta_shape > 0 and math.isfinite(self.beta_shape)):
            raise ContractError("beta_shape must be positive and finite")
        if not 0 <= self.half_split_prob <= 1:
            raise ContractError("half_split_prob must lie in [0, 1]")
        if not self.observed_steps:
            object.__setattr__(self, "observed_steps", (True,) * self.steps)
        object.__setattr__(self, "p01_scaling", tuple(float(v) for v in self.p01_scaling))
        object.__setattr__(self, "px_regression", tuple(float(v) for v in self.px_regression))

    @classmethod
    def constant(cls, p01: float, beta_shape: float, steps: int = 5, half_split_prob: float = 0.5):
        """Generator with the same P01 in every cell."""
        return cls(steps, np.full((steps, 4, 3), float(p01)), (float(p01), 0.0), (1.0 - p01, 0.0),
                   beta_shape, half_split_prob)

    @property
    def output_resolution_s(self) -> int:
        return SECONDS_PER_DAY // 2 ** self.steps

    def px_probability(self, volume_class) -> np.ndarray:
        """P(0 < W < 1) from the volume regression, clamped to [0, 1]."""
        a, b = self.px_regression
        return np.clip(a + b * np.asarray(volume_class, dtype=float), 0.0, 1.0)

    def to_dict(self) -> dict:
        cells = []
        for k in range(self.steps):
            for p, pos in enumerate(POSITIONS):
                for v in VOLUME_CLASSES:
                    cell = {"step": k + 1, "position": pos, "volume_class": v,
                            "p01": float(self.p01_by_cell[k, p, v - 1])}
                    if self.cell_counts is not None:
                        cell["n"] = int(self.cell_counts[k, p, v - 1])
                    cells.append(cell)
        return {
            "steps": self.steps,
            "output_resolution_s": self.output_resolution_s,
            "p01_scaling": {"c1": self.p01_scaling[0], "c2": self.p01_scaling[1],
                            "resolution_unit": "hours"},
            "px_regression": {"a": self.px_regression[0], "b_m": self.px_regression[1]},
            "beta_shape": self.beta_shape,
            "half_split_prob": self.half_split_prob,
            "observed_steps": list(self.observed_steps),
            "p01_by_cell": cells,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CascadeParams":
        steps = int(doc["steps"])
        table = np.full((steps, 4, 3), np.nan)
        counts = np.zeros((steps, 4, 3), dtype=np.int64)
        has_counts = False
        for cell in doc["p01_by_cell"]:
            idx = (int(cell["step"]) - 1, POSITIONS.index(cell["position"]), int(cell["volume_class"]) - 1)
            table[idx] = float(cell["p01"])
            if "n" in cell:
                counts[idx] = int(cell["n"])
                has_counts = True
        if np.isnan(table).any():
            raise ContractError("cascade parameter document is missing P01 cells")
        return cls(
            steps=steps,
            p01_by_cell=table,
            p01_scaling=(doc["p01_scaling"]["c1"], doc["p01_scaling"]["c2"]),
            px_regression=(doc["px_regression"]["a"], doc["px_regression"]["b_m"]),
            beta_shape=float(doc["beta_shape"]),
            half_split_prob=float(doc.get("half_split_prob", 0.5)),
            observed_steps=tuple(bool(b) for b in doc.get("observed_steps", [True] * steps)),
            cell_counts=counts if has_counts else None,
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CascadeParams":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------- classification


def _position_codes(volumes: np.ndarray, left_wet: np.ndarray, right_wet: np.ndarray) -> np.ndarray:
    """Vectorised four-way neighbour rule; only meaningful where volumes > 0."""
    code = np.full(volumes.shape, ENCLOSED, dtype=np.int64)
    code[~left_wet & right_wet] = STARTING
    code[left_wet & ~right_wet] = ENDING
    code[~left_wet & ~right_wet] = ISOLATED
    return code


def classify_position(volumes, index: int) -> str:
    """Position class of a wet box; series ends count as dry neighbours."""
    v = np.asarray(volumes, dtype=float)
    if not 0 <= index < len(v):
        raise ContractError("index outside the series")
    if not v[index] > 0:
        raise ContractError("position classes are defined for wet boxes only")
    left = index > 0 and v[index - 1] > 0
    right = index < len(v) - 1 and v[index + 1] > 0
    code = _position_codes(np.array([1.0]), np.array([left]), np.array([right]))[0]
    return POSITIONS[code]


def _neighbour_wetness(flat: np.ndarray, breaks_after: np.ndarray):
    """Wet state of left/right neighbours in a flattened box sequence.

    ``breaks_after[i]`` is True when box i+1 does not directly follow box i in
    time; such neighbours count as dry. NaN boxes count as dry.
    """
    wet = np.nan_to_num(flat, nan=0.0) > 0
    left = np.zeros_like(wet)
    right = np.zeros_like(wet)
    left[1:] = wet[:-1] & ~breaks_after
    right[:-1] = wet[1:] & ~breaks_after
    return left, right


def _volume_classes(volumes: np.ndarray, wet: np.ndarray) -> np.ndarray:
    vc = np.zeros(volumes.shape, dtype=np.int64)
    if not wet.any():
        return vc
    p33, p67 = np.percentile(volumes[wet], [33, 67])
    vc[wet] = np.where(volumes[wet] <= p33, 1, np.where(volumes[wet] <= p67, 2, 3))
    return vc


# ---------------------------------------------------------------- calibration


def _day_grid(s: DepthSeries, steps: int):
    """Continuous (n_days, boxes_per_day) grid from first to last day; NaN where missing."""
    ords = s.day_ordinal
    first = int(ords[0])
    n_days = int(ords[-1]) - first + 1
    grid = np.full((n_days, s.boxes_per_day), np.nan)
    grid[ords - first, s.boxes] = s.depths
    return grid


def calibrate(hourly: DepthSeries, steps: int = 5, min_years: float = MIN_CALIBRATION_YEARS) -> CascadeParams:
    """Estimate cascade statistics from a high-resolution record.

    Steps whose child resolution is not a multiple of the record's resolution
    cannot be observed; their P01 cells are extrapolated from the finest
    observed step with the fitted scaling law ``P01(r) = c1 * r**c2`` (r in
    hours of the parent box).
    """
    if steps < 1:
        raise ContractError("steps must be at least 1")
    if len(hourly) == 0:
        raise ContractError("empty calibration series")
    res = hourly.resolution_s
    years_span = len(np.unique(hourly.years))
    if years_span < min_years:
        warnings.warn(f"calibration record spans {years_span} years (< {min_years})", stacklevel=2)
    measurable = 0
    for k in range(1, steps + 1):
        child = SECONDS_PER_DAY / 2 ** k
        if child % res == 0:
            measurable = k
        else:
            break
    if measurable == 0:
        raise ContractError(f"{res} s data cannot resolve even one halving of the day")

    grid = _day_grid(hourly, steps)
    complete = ~np.isnan(grid).any(axis=1)
    n_days = grid.shape[0]

    table = np.full((steps, 4, 3), np.nan)
    counts = np.zeros((steps, 4, 3), dtype=np.int64)
    pooled = np.full(steps, np.nan)
    interior = []
    for k in range(1, measurable + 1):
        n_parent = 2 ** (k - 1)
        per_child = grid.shape[1] // (2 * n_parent)
        child = grid.reshape(n_days, 2 * n_parent, per_child).sum(axis=2)
        left = child[:, 0::2]
        right = child[:, 1::2]
        parent = left + right
        flat = parent.ravel()
        breaks = np.zeros(flat.size - 1, dtype=bool) if flat.size > 1 else np.zeros(0, dtype=bool)
        wet = np.nan_to_num(flat, nan=0.0) > 0
        lw, rw = _neighbour_wetness(flat, breaks)
        usable = np.repeat(complete, n_parent) & wet
        if not usable.any():
            continue
        pos = _position_codes(flat, lw, rw)
        vc = _volume_classes(np.nan_to_num(flat), usable)
        lflat = left.ravel()
        rflat = right.ravel()
        w = lflat[usable] / flat[usable]
        degenerate = (lflat[usable] == 0) | (rflat[usable] == 0)
        pooled[k - 1] = degenerate.mean()
        interior.append(w[~degenerate])
        p_u, v_u = pos[usable], vc[usable]
        for p in range(4):
            for v in VOLUME_CLASSES:
                sel = (p_u == p) & (v_u == v)
                counts[k - 1, p, v - 1] = sel.sum()
                table[k - 1, p, v - 1] = degenerate[sel].mean() if sel.any() else pooled[k - 1]

    observed = ~np.isnan(pooled)
    if not observed.any():
        raise EstimationError("no wet days with complete sub-daily data")
    parent_hours = 24.0 / 2.0 ** np.arange(steps)
    c1, c2 = _fit_scaling_law(parent_hours[observed], pooled[observed])

    last = int(np.nonzero(observed)[0].max())
    for k in range(steps):
        if observed[k]:
            continue
        ref = table[last]
        scaled = c1 * parent_hours[k] ** c2
        base = pooled[last]
        table[k] = np.clip(ref * (scaled / base) if base > 0 else scaled, 0.0, 1.0)

    a, b_m = _fit_px_regression(table[observed], counts[observed])
    beta_shape = _beta_shape_moments(np.concatenate(interior) if interior else np.array([]))
    return CascadeParams(steps, table, (c1, c2), (a, b_m), beta_shape, 0.5,
                         tuple(bool(o) for o in observed), counts)


def _fit_scaling_law(r_hours: np.ndarray, p01: np.ndarray) -> tuple[float, float]:
    ok = p01 > 0
    if ok.sum() >= 2:
        c2, logc1 = np.polyfit(np.log(r_hours[ok]), np.log(p01[ok]), 1)
        return float(np.exp(logc1)), float(c2)
    return float(np.mean(p01)), 0.0


def _fit_px_regression(table: np.ndarray, counts: np.ndarray) -> tuple[float, float]:
    """P(x/x) = a + b_m * vc; b_m is the mean per-step slope."""
    vcs = np.array(VOLUME_CLASSES, dtype=float)
    slopes, points = [], []
    for k in range(table.shape[0]):
        w = counts[k].sum(axis=0)
        pxx = 1.0 - (table[k] * counts[k]).sum(axis=0) / np.where(w > 0, w, 1)
        ok = w > 0
        if ok.sum() >= 2:
            slopes.append(np.polyfit(vcs[ok], pxx[ok], 1)[0])
        points.extend(zip(vcs[ok], pxx[ok]))
    if not points:
        return 1.0, 0.0
    b_m = float(np.mean(slopes)) if slopes else 0.0
    v, p = np.array(points).T
    return float(np.mean(p - b_m * v)), b_m


def _beta_shape_moments(w: np.ndarray) -> float:
    if w.size < 2:
        warnings.warn("no interior cascade weights; beta shape set to 1 (uniform)", stacklevel=3)
        return 1.0
    var = float(np.var(w))
    if var <= 0:
        return BETA_SHAPE_CAP
    if var >= 0.25:
        warnings.warn(f"interior weight variance {var:.3f} >= 1/4; beta shape floored", stacklevel=3)
        return BETA_SHAPE_FLOOR
    a = (1.0 / (4.0 * var) - 1.0) / 2.0
    return float(min(max(a, BETA_SHAPE_FLOOR), BETA_SHAPE_CAP))


# ---------------------------------------------------------------- disaggregation

WeightSampler = Callable[[np.random.Generator, int], np.ndarray]


def _day_streams(daily: DepthSeries, seed: int, steps: int, beta_shape: float,
                 weight_sampler: WeightSampler | None):
    """Per-day random draws in a fixed slot layout (heap order over parents)."""
    n_slots = 2 ** steps - 1
    n = len(daily)
    u_deg = np.empty((n, n_slots))
    u_side = np.empty((n, n_slots))
    w = np.empty((n, n_slots))
    key = np.empty(2, dtype=np.uint64)
    for i, (y, d) in enumerate(zip(daily.years.tolist(), daily.days.tolist())):
        key[:] = derive_key(seed, daily.station_id, y, d)
        rng = np.random.Generator(np.random.Philox(key=key))
        u_deg[i] = rng.random(n_slots)
        u_side[i] = rng.random(n_slots)
        if weight_sampler is None:
            w[i] = rng.beta(beta_shape, beta_shape, n_slots)
        else:
            w[i] = weight_sampler(rng, n_slots)
    return u_deg, u_side, w


def disaggregate(daily: DepthSeries, params: CascadeParams, seed: int,
                 weight_sampler: WeightSampler | None = None) -> DepthSeries:
    """Split daily totals into ``2**steps`` boxes per day.

    Random numbers come from a Philox stream keyed by (seed, station, year,
    day), so any subset of days reproduces the same output for those days.
    ``weight_sampler(rng, size)`` replaces the beta generator when given.
    """
    if daily.resolution_s != SECONDS_PER_DAY:
        raise ContractError("disaggregation input must have daily resolution")
    steps = params.steps
    out_res = params.output_resolution_s
    n = len(daily)
    if n == 0:
        return DepthSeries(daily.station_id, out_res, [], [], [], [], daily.calendar)
    u_deg, u_side, w_draw = _day_streams(daily, seed, steps, params.beta_shape, weight_sampler)
    ords = daily.day_ordinal
    day_break = np.diff(ords) != 1

    boxes = daily.depths.reshape(n, 1).astype(float)
    for k in range(1, steps + 1):
        n_parent = boxes.shape[1]
        flat = boxes.ravel()
        breaks = np.zeros(flat.size - 1, dtype=bool)
        if n_parent == 1:
            breaks[:] = day_break
        else:
            breaks[n_parent - 1::n_parent] = day_break
        wet = flat > 0
        lw, rw = _neighbour_wetness(flat, breaks)
        pos = _position_codes(flat, lw, rw)
        vc = _volume_classes(flat, wet)
        p01 = np.where(wet, params.p01_by_cell[k - 1, pos, np.maximum(vc, 1) - 1], 0.0)
        slot = slice(n_parent - 1, 2 * n_parent - 1)
        deg = u_deg[:, slot].ravel() < p01
        first = u_side[:, slot].ravel() < params.half_split_prob
        weight = np.where(deg, np.where(first, 1.0, 0.0), w_draw[:, slot].ravel())
        left = weight * flat
        right = flat - left
        children = np.empty((n, 2 * n_parent))
        children[:, 0::2] = left.reshape(n, n_parent)
        children[:, 1::2] = right.reshape(n, n_parent)
        boxes = children

    bpd = boxes.shape[1]
    return DepthSeries(
        daily.station_id,
        out_res,
        np.repeat(daily.years, bpd),
        np.repeat(daily.days, bpd),
        np.tile(np.arange(bpd), n),
        boxes.ravel(),
        daily.calendar,
    )


# ---------------------------------------------------------------- resolution handling


def interpolation_weight(r_lo: float, r_hi: float, target_s: float) -> float:
    return math.log(r_hi / target_s) / math.log(r_hi / r_lo)


def interpolate_resolution(fine: DepthSeries, target_s: int, source_tag: str = "observed") -> AnnualMaxSeries:
    """Annual maxima at a non-dyadic resolution by log-space interpolation.

    Maxima are computed at the two bracketing dyadic resolutions and combined
    as ``x_lo**w * x_hi**(1 - w)``. A target on the dyadic ladder is computed
    directly.
    """
    duration_h = target_s / 3600.0
    if duration_h not in DURATIONS_H:
        raise ContractError(f"target {target_s} s is not one of the IDF durations")
    ladder = []
    r = fine.resolution_s
    while r <= SECONDS_PER_DAY:
        ladder.append(r)
        r *= 2
    if target_s in ladder:
        years, vals = annual_maxima(fine, int(target_s))
        return AnnualMaxSeries(fine.station_id, int(duration_h), years, vals, source_tag)
    if not ladder[0] < target_s < ladder[-1]:
        raise ContractError(f"target {target_s} s outside the dyadic range {ladder[0]}..{ladder[-1]} s")
    i = int(np.searchsorted(ladder, target_s))
    r_lo, r_hi = ladder[i - 1], ladder[i]
    y_lo, x_lo = annual_maxima(fine, r_lo)
    y_hi, x_hi = annual_maxima(fine, r_hi)
    common, i_lo, i_hi = np.intersect1d(y_lo, y_hi, return_indices=True)
    w = interpolation_weight(r_lo, r_hi, target_s)
    vals = x_lo[i_lo] ** w * x_hi[i_hi] ** (1.0 - w)
    return AnnualMaxSeries(fine.station_id, int(duration_h), common, vals, source_tag)


def adjust_disaggregated_extremes(disagg_am: AnnualMaxSeries, reference_am: AnnualMaxSeries) -> AnnualMaxSeries:
    """GEV quantile mapping of disaggregated maxima onto a reference record."""
    from .bias import qm_historical

    if len(disagg_am) == 0 or len(reference_am) == 0:
        raise ContractError("both annual-maximum series must be non-empty")
    return qm_historical(disagg_am, reference_am, "gev")
