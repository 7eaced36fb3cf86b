"""Rainfall series containers, CSV ingestion, annual maxima and ensembles.

Depth series are stored column-wise as numpy arrays. A stamp is the triple
(year, day_of_year, box) where ``box`` counts boxes of ``resolution_s``
seconds from midnight; for hourly data the box index is the clock hour.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ContractError, ParseError, ValidationError

log = logging.getLogger(__name__)

DURATIONS_H = (1, 2, 6, 12, 24)
SECONDS_PER_DAY = 86400
CALENDARS = ("gregorian", "noleap")
ENSEMBLE_TAGS = ("mm-min", "mm-med", "mm-max")
MAX_MISSING_FRACTION = 0.20

DEPTH_HEADER = ["station_id", "year", "day_of_year", "hour", "depth_mm"]
AM_HEADER = ["station_id", "duration_h", "year", "intensity_mm_per_h", "source_tag"]


@dataclass(frozen=True)
class SeriesStamp:
    year: int
    day_of_year: int
    hour: int


def days_in_year(year, calendar: str = "gregorian"):
    year = np.asarray(year)
    if calendar == "noleap":
        return np.full(year.shape, 365, dtype=np.int64)
    leap = ((year % 4 == 0) & (year % 100 != 0)) | (year % 400 == 0)
    return np.where(leap, 366, 365).astype(np.int64)


def day_ordinal(years, doys, calendar: str = "gregorian") -> np.ndarray:
    """Consecutive integer day index; adjacent days differ by exactly one."""
    years = np.asarray(years, dtype=np.int64)
    doys = np.asarray(doys, dtype=np.int64)
    if calendar == "noleap":
        return years * 365 + doys - 1
    jan1 = (years - 1970).astype("datetime64[Y]").astype("datetime64[D]").astype(np.int64)
    return jan1 + doys - 1


def _check_calendar(calendar):
    if calendar not in CALENDARS:
        raise ContractError(f"unknown calendar {calendar!r}; expected one of {CALENDARS}")


@dataclass(frozen=True, eq=False)
class DepthSeries:
    """Rainfall depths (mm) on a regular grid of ``resolution_s`` second boxes.

    Missing boxes are simply absent. Values below the wet threshold are kept
    as given; see :func:`apply_wet_threshold`.
    """

    station_id: str
    resolution_s: int
    years: np.ndarray
    days: np.ndarray
    boxes: np.ndarray
    depths: np.ndarray
    calendar: str = "gregorian"

    def __post_init__(self):
        _check_calendar(self.calendar)
        res = int(self.resolution_s)
        if res <= 0 or SECONDS_PER_DAY % res:
            raise ContractError(f"resolution {self.resolution_s} s does not divide one day")
        object.__setattr__(self, "resolution_s", res)
        for name, dtype in (("years", np.int64), ("days", np.int64), ("boxes", np.int64), ("depths", float)):
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = len(self.depths)
        if not (len(self.years) == len(self.days) == len(self.boxes) == n):
            raise ValidationError("stamp and depth columns differ in length")
        if n == 0:
            return
        if not np.all(np.isfinite(self.depths)):
            raise ValidationError("depths must be finite")
        if np.any(self.depths < 0):
            raise ValidationError("depths must be non-negative")
        ndays = days_in_year(self.years, self.calendar)
        if np.any(self.days < 1) or np.any(self.days > ndays):
            raise ValidationError("day_of_year outside the calendar year")
        if np.any(self.boxes < 0) or np.any(self.boxes >= self.boxes_per_day):
            raise ValidationError("box index outside the day")
        if np.any(np.diff(self.box_ordinal) <= 0):
            raise ValidationError("stamps must be strictly increasing")

    @property
    def boxes_per_day(self) -> int:
        return SECONDS_PER_DAY // self.resolution_s

    @property
    def day_ordinal(self) -> np.ndarray:
        return day_ordinal(self.years, self.days, self.calendar)

    @property
    def box_ordinal(self) -> np.ndarray:
        return self.day_ordinal * self.boxes_per_day + self.boxes

    @property
    def hours(self) -> np.ndarray:
        return self.boxes * (self.resolution_s / 3600.0)

    def __len__(self):
        return len(self.depths)

    def stamp(self, i: int) -> SeriesStamp:
        return SeriesStamp(int(self.years[i]), int(self.days[i]), int(self.hours[i]))

    def with_depths(self, depths) -> "DepthSeries":
        return DepthSeries(self.station_id, self.resolution_s, self.years, self.days, self.boxes,
                           depths, self.calendar)

    def select_years(self, first: int, last: int) -> "DepthSeries":
        keep = (self.years >= first) & (self.years <= last)
        return DepthSeries(self.station_id, self.resolution_s, self.years[keep], self.days[keep],
                           self.boxes[keep], self.depths[keep], self.calendar)

    def daily_totals(self) -> "DepthSeries":
        """Aggregate to daily boxes. Days with any missing box are dropped."""
        if len(self) == 0:
            return DepthSeries(self.station_id, SECONDS_PER_DAY, [], [], [], [], self.calendar)
        ords = self.day_ordinal
        uniq, start, counts = np.unique(ords, return_index=True, return_counts=True)
        totals = np.add.reduceat(self.depths, start)
        full = counts == self.boxes_per_day
        return DepthSeries(self.station_id, SECONDS_PER_DAY, self.years[start][full],
                           self.days[start][full], np.zeros(full.sum(), dtype=np.int64),
                           totals[full], self.calendar)


@dataclass(frozen=True, eq=False)
class AnnualMaxSeries:
    """Yearly maximum intensities (mm/h) for one station and duration.

    Years absent from ``years`` are gaps. ``flags`` carries processing notes
    (for example an equiratio fallback) and is not written to CSV.
    """

    station_id: str
    duration_h: int
    years: np.ndarray
    values: np.ndarray
    source_tag: str = "observed"
    flags: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.duration_h not in DURATIONS_H:
            raise ValidationError(f"duration {self.duration_h} h not in {DURATIONS_H}")
        object.__setattr__(self, "duration_h", int(self.duration_h))
        years = np.array(self.years, dtype=np.int64)
        values = np.array(self.values, dtype=float)
        years.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "flags", frozenset(self.flags))
        if len(years) != len(values):
            raise ValidationError("years and values differ in length")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise ValidationError("annual maxima must be positive and finite")
        if np.any(np.diff(years) <= 0):
            raise ValidationError("years must be strictly increasing without duplicates")
        check_source_tag(self.source_tag)

    def __len__(self):
        return len(self.values)

    def replace(self, values=None, years=None, source_tag=None, flags=None) -> "AnnualMaxSeries":
        return AnnualMaxSeries(
            self.station_id,
            self.duration_h,
            self.years if years is None else years,
            self.values if values is None else values,
            self.source_tag if source_tag is None else source_tag,
            self.flags if flags is None else flags,
        )

    def select_years(self, first: int, last: int) -> "AnnualMaxSeries":
        keep = (self.years >= first) & (self.years <= last)
        return self.replace(values=self.values[keep], years=self.years[keep])


def check_source_tag(tag: str) -> None:
    if tag == "observed" or tag in ENSEMBLE_TAGS:
        return
    if tag.startswith("model:") and len(tag) > len("model:"):
        return
    raise ValidationError(f"invalid source tag {tag!r}")


@dataclass(frozen=True)
class EnsembleSet:
    members: tuple

    def __post_init__(self):
        members = tuple(self.members)
        object.__setattr__(self, "members", members)
        if not members:
            raise ContractError("ensemble needs at least one member")
        first = members[0]
        for m in members[1:]:
            if m.station_id != first.station_id or m.duration_h != first.duration_h:
                raise ContractError("ensemble members must share station and duration")
            if not np.array_equal(m.years, first.years):
                raise ContractError("ensemble members must share an identical year vector")


# ---------------------------------------------------------------- CSV I/O


def _fmt_float(x: float) -> str:
    return repr(float(x))


def load_depth_csv(path, resolution_s: int, calendar: str = "gregorian") -> DepthSeries:
    """Read a ``station_id,year,day_of_year,hour,depth_mm`` file.

    Rows may appear in any order; the result is sorted by stamp. For
    sub-hourly resolutions the hour column holds the fractional start hour.
    """
    _check_calendar(calendar)
    if SECONDS_PER_DAY % int(resolution_s):
        raise ContractError(f"resolution {resolution_s} s does not divide one day")
    box_h = resolution_s / 3600.0
    stations, years, days, boxes, depths, lines = set(), [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != DEPTH_HEADER:
            raise ParseError(f"expected header {','.join(DEPTH_HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise ParseError(f"expected 5 fields, got {len(row)}", line=lineno)
            try:
                year = int(row[1])
                doy = int(row[2])
                hour = float(row[3])
                depth = float(row[4])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if not math.isfinite(depth):
                raise ValidationError(f"line {lineno}: depth is not finite")
            if depth < 0:
                raise ValidationError(f"line {lineno}: negative depth {depth}")
            if not 0 <= hour < 24:
                raise ValidationError(f"line {lineno}: hour {hour} outside [0, 24)")
            box = hour / box_h
            if abs(box - round(box)) > 1e-9:
                raise ValidationError(f"line {lineno}: hour {hour} not on the {resolution_s} s grid")
            if not 1 <= doy <= int(days_in_year(year, calendar)):
                raise ValidationError(f"line {lineno}: day_of_year {doy} invalid for {year}")
            stations.add(row[0])
            years.append(year)
            days.append(doy)
            boxes.append(int(round(box)))
            depths.append(depth)
            lines.append(lineno)
    if len(stations) > 1:
        raise ValidationError(f"{path}: more than one station_id ({sorted(stations)})")
    station = stations.pop() if stations else ""
    years_a = np.array(years, dtype=np.int64)
    days_a = np.array(days, dtype=np.int64)
    boxes_a = np.array(boxes, dtype=np.int64)
    bpd = SECONDS_PER_DAY // int(resolution_s)
    ordinal = day_ordinal(years_a, days_a, calendar) * bpd + boxes_a
    order = np.argsort(ordinal, kind="stable")
    dup = np.nonzero(np.diff(ordinal[order]) == 0)[0]
    if len(dup):
        ln = lines[order[dup[0] + 1]]
        raise ValidationError(f"line {ln}: duplicate stamp")
    return DepthSeries(station, int(resolution_s), years_a[order], days_a[order], boxes_a[order],
                       np.array(depths, dtype=float)[order], calendar)


def write_depth_csv(path, s: DepthSeries) -> None:
    integral = s.resolution_s % 3600 == 0
    hours = s.hours
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEPTH_HEADER)
        for y, d, h, v in zip(s.years.tolist(), s.days.tolist(), hours.tolist(), s.depths.tolist()):
            w.writerow([s.station_id, y, d, int(h) if integral else _fmt_float(h), _fmt_float(v)])


def read_am_csv(path) -> list[AnnualMaxSeries]:
    """Read one or more annual-maximum series from a single file."""
    groups: dict[tuple, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != AM_HEADER:
            raise ParseError(f"expected header {','.join(AM_HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise ParseError(f"expected 5 fields, got {len(row)}", line=lineno)
            try:
                key = (row[0], int(row[1]), row[4])
                groups.setdefault(key, []).append((int(row[2]), float(row[3]), lineno))
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    out = []
    for (station, dur, tag), rows in groups.items():
        rows.sort()
        try:
            out.append(AnnualMaxSeries(station, dur, [r[0] for r in rows], [r[1] for r in rows], tag))
        except ValidationError as exc:
            raise ValidationError(f"{path}: series {station}/{dur}h/{tag}: {exc}") from None
    return out


def write_am_csv(path, series: Iterable[AnnualMaxSeries]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AM_HEADER)
        for s in series:
            for y, v in zip(s.years.tolist(), s.values.tolist()):
                w.writerow([s.station_id, s.duration_h, y, _fmt_float(v), s.source_tag])


# ---------------------------------------------------------------- operations


def apply_wet_threshold(s: DepthSeries, threshold: float) -> DepthSeries:
    if threshold < 0:
        raise ContractError("threshold must be non-negative")
    return s.with_depths(np.where(s.depths < threshold, 0.0, s.depths))


def annual_maxima(s: DepthSeries, window_s: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-year maximum sliding-window intensity (mm/h) for any window length.

    Windows stay inside one calendar year. Missing boxes count as dry; years
    missing more than 20% of their boxes, and years without rain, are left out.
    """
    if window_s <= 0 or window_s % s.resolution_s:
        raise ContractError(
            f"window of {window_s} s is not a multiple of the {s.resolution_s} s resolution")
    k = window_s // s.resolution_s
    bpd = s.boxes_per_day
    hours = window_s / 3600.0
    out_years, out_vals = [], []
    if len(s) == 0:
        return np.array([], dtype=np.int64), np.array([], dtype=float)
    year_values = np.unique(s.years)
    bounds = np.searchsorted(s.years, np.append(year_values, year_values[-1] + 1))
    for i, year in enumerate(year_values.tolist()):
        lo, hi = bounds[i], bounds[i + 1]
        n_total = int(days_in_year(year, s.calendar)) * bpd
        present = hi - lo
        if (n_total - present) / n_total > MAX_MISSING_FRACTION:
            log.debug("%s %d: %d of %d boxes missing, year skipped", s.station_id, year,
                      n_total - present, n_total)
            continue
        grid = np.zeros(n_total)
        grid[(s.days[lo:hi] - 1) * bpd + s.boxes[lo:hi]] = s.depths[lo:hi]
        if k > n_total:
            continue
        csum = np.concatenate(([0.0], np.cumsum(grid)))
        best = float(np.max(csum[k:] - csum[:-k])) / hours
        if best <= 0:
            log.debug("%s %d: dry year skipped", s.station_id, year)
            continue
        out_years.append(year)
        out_vals.append(best)
    return np.array(out_years, dtype=np.int64), np.array(out_vals, dtype=float)


def extract_annual_max(s: DepthSeries, duration_h: int, source_tag: str = "observed") -> AnnualMaxSeries:
    if duration_h not in DURATIONS_H:
        raise ContractError(f"duration {duration_h} h not in {DURATIONS_H}")
    years, values = annual_maxima(s, int(duration_h * 3600))
    return AnnualMaxSeries(s.station_id, duration_h, years, values, source_tag)


def ensemble_stats(e: EnsembleSet) -> tuple[AnnualMaxSeries, AnnualMaxSeries, AnnualMaxSeries]:
    """Pointwise minimum, median and maximum across ensemble members."""
    if not isinstance(e, EnsembleSet):
        e = EnsembleSet(tuple(e))
    stack = np.vstack([m.values for m in e.members])
    first = e.members[0]
    return tuple(
        AnnualMaxSeries(first.station_id, first.duration_h, first.years, fn(stack, axis=0), tag)
        for fn, tag in ((np.min, "mm-min"), (np.median, "mm-med"), (np.max, "mm-max"))
    )


def align_years(*series: AnnualMaxSeries) -> tuple[np.ndarray, list[np.ndarray]]:
    """Common years of several series and each series' values on them."""
    common = series[0].years
    for s in series[1:]:
        common = np.intersect1d(common, s.years)
    return common, [s.values[np.searchsorted(s.years, common)] for s in series]


def as_values(series) -> np.ndarray:
    if isinstance(series, AnnualMaxSeries):
        return np.asarray(series.values, dtype=float)
    return np.asarray(series, dtype=float)
