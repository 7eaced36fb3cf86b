"""Command-line entry point: ``idf <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from .bias import eqm_projected, qm_historical
from .cascade import CascadeParams, calibrate, disaggregate
from .data import (SECONDS_PER_DAY, AnnualMaxSeries, EnsembleSet, apply_wet_threshold, load_depth_csv,
                   read_am_csv, write_am_csv, write_depth_csv)
from .errors import IdfError
from .inference import FitRequest, ReturnLevelEstimate, SamplerConfig, fit_demc_batch, return_level
from .pipeline import (CHANGE_HEADER, COMPARISON_CASES, IDF_HEADER, RETURN_PERIODS_Y, SKILL_HEADER, TREND_HEADER,
                       StudyConfig, _fmt, run_pipeline)
from .seeding import derive_seed
from .trend import change_z, mann_kendall, percent_change, skill_score, taylor_stats

log = logging.getLogger("idfstudy")

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _strs(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _filter(series: list[AnnualMaxSeries], args) -> list[AnnualMaxSeries]:
    out = series
    if getattr(args, "stations", None):
        out = [s for s in out if s.station_id in set(args.stations)]
    if getattr(args, "durations", None):
        out = [s for s in out if s.duration_h in set(args.durations)]
    return out


def _write(path, header, rows) -> None:
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="", encoding="utf-8")
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    finally:
        if fh is not sys.stdout:
            fh.close()


def _sampler(args) -> SamplerConfig:
    if getattr(args, "sampler", None):
        with open(args.sampler, encoding="utf-8") as fh:
            return SamplerConfig.from_dict(json.load(fh))
    return SamplerConfig()


# ---------------------------------------------------------------- subcommands


def cmd_pipeline(args) -> int:
    cfg = StudyConfig.load(args.config).select(args.stations, args.durations, args.seed)
    if args.workers:
        cfg = StudyConfig(cfg.stations, cfg.baseline_window, cfg.future_window, cfg.durations_h,
                          cfg.return_periods_y, cfg.bias_method, cfg.sampler, cfg.master_seed,
                          cfg.cascade_steps, args.workers)
    summary = run_pipeline(cfg, args.out)
    for f in summary.failed_cells:
        log.error("failed cell: %s %sh", f["station"], f["duration_h"])
    log.info("%d of %d cells succeeded", summary.n_cells - len(summary.failed_cells), summary.n_cells)
    return summary.exit_code


def cmd_disagg_calibrate(args) -> int:
    hourly = load_depth_csv(args.input, args.resolution_s, args.calendar)
    params = calibrate(hourly, steps=args.steps)
    params.save(args.out)
    return EXIT_OK


def cmd_disagg_apply(args) -> int:
    params = CascadeParams.load(args.params)
    daily = load_depth_csv(args.input, SECONDS_PER_DAY, args.calendar)
    if args.wet_threshold:
        daily = apply_wet_threshold(daily, args.wet_threshold)
    seed = derive_seed(args.seed, daily.station_id, "disagg")
    write_depth_csv(args.out, disaggregate(daily, params, seed))
    return EXIT_OK


def _match(series, station, duration):
    for s in series:
        if s.station_id == station and s.duration_h == duration:
            return s
    return None


def cmd_bias_correct(args) -> int:
    models = _filter(read_am_csv(args.model), args)
    obs = read_am_csv(args.obs)
    hist = read_am_csv(args.model_hist) if args.model_hist else None
    out, status = [], EXIT_OK
    for m in models:
        o = _match(obs, m.station_id, m.duration_h)
        try:
            if o is None:
                raise IdfError(f"no observed series for {m.station_id} {m.duration_h}h")
            if args.stage == "historical":
                method = _auto_method(m, o) if args.method == "auto" else args.method
                out.append(qm_historical(m, o, method))
            else:
                h = _match([s for s in hist or [] if s.source_tag == m.source_tag], m.station_id, m.duration_h)
                if h is None:
                    raise IdfError(f"no historical model series for {m.station_id} {m.duration_h}h {m.source_tag}")
                method = _auto_method(h, o) if args.method == "auto" else args.method
                out.append(eqm_projected(m, h, o, method))
        except IdfError as exc:
            log.error("%s %dh %s: %s", m.station_id, m.duration_h, m.source_tag, exc)
            status = EXIT_PARTIAL
    write_am_csv(args.out, out)
    return status


def _auto_method(model: AnnualMaxSeries, obs: AnnualMaxSeries) -> str:
    best, best_score = "gev", -np.inf
    for method in ("gev", "kde"):
        try:
            score = skill_score(taylor_stats(qm_historical(model, obs, method), obs, EnsembleSet((model,))))
        except IdfError:
            continue
        if score > best_score:
            best, best_score = method, score
    return best


def _fit_all(series, kinds, args):
    reqs, keys = [], []
    for s in series:
        for kind in kinds:
            seed = derive_seed(args.seed, s.station_id, s.duration_h, s.source_tag, kind, "fit")
            reqs.append(FitRequest(s, kind, seed))
            keys.append((s, kind))
    return list(zip(keys, fit_demc_batch(reqs, _sampler(args))))


def cmd_fit_gev(args) -> int:
    series = _filter(read_am_csv(args.input), args)
    docs, status = [], EXIT_OK
    for (s, kind), post in _fit_all(series, [args.kind], args):
        doc = {"station": s.station_id, "duration_h": s.duration_h, "source_tag": s.source_tag}
        if isinstance(post, Exception):
            log.error("%s %dh %s: %s", s.station_id, s.duration_h, s.source_tag, post)
            doc["error"] = str(post)
            status = EXIT_PARTIAL
        else:
            doc.update(post.summary())
        docs.append(doc)
    text = json.dumps(docs, indent=2, sort_keys=True) + "\n"
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return status


def cmd_idf(args) -> int:
    series = _filter(read_am_csv(args.input), args)
    kinds = ["stationary", "nonstationary"] if args.kind == "both" else [args.kind]
    rows, status = [], EXIT_OK
    for (s, kind), post in _fit_all(series, kinds, args):
        if isinstance(post, Exception):
            log.error("%s %dh %s %s: %s", s.station_id, s.duration_h, s.source_tag, kind, post)
            status = EXIT_PARTIAL
            continue
        for T in args.periods:
            e = return_level(post, T)
            rows.append([s.station_id, s.duration_h, T, args.period, s.source_tag, kind, e.q05, e.q50, e.q95])
    _write(args.out, IDF_HEADER, rows)
    return status


def cmd_trend(args) -> int:
    rows, status = [], EXIT_OK
    for s in _filter(read_am_csv(args.input), args):
        try:
            t = mann_kendall(s)
        except IdfError as exc:
            log.error("%s %dh %s: %s", s.station_id, s.duration_h, s.source_tag, exc)
            status = EXIT_PARTIAL
            continue
        rows.append([s.station_id, s.duration_h, s.source_tag, t.n, t.s_statistic, t.variance_s, t.z, t.p_value,
                     t.sen_slope_per_decade, int(t.significant_10pct), t.correction_factor])
    _write(args.out, TREND_HEADER, rows)
    return status


def cmd_skill(args) -> int:
    models = _filter(read_am_csv(args.model), args)
    obs = read_am_csv(args.obs)
    rows, status = [], EXIT_OK
    groups: dict = {}
    for m in models:
        groups.setdefault((m.station_id, m.duration_h), []).append(m)
    for (station, d), members in sorted(groups.items()):
        o = _match(obs, station, d)
        for m in members:
            try:
                if o is None:
                    raise IdfError("no observed series")
                others = [x for x in members if np.array_equal(x.years, m.years)]
                ts = taylor_stats(m, o, EnsembleSet(tuple(others)))
                rows.append([station, d, m.source_tag, "input", ts.normalized_std, ts.pattern_corr,
                             ts.centered_rmse, ts.r0, skill_score(ts)])
            except IdfError as exc:
                log.error("%s %dh %s: %s", station, d, m.source_tag, exc)
                status = EXIT_PARTIAL
    _write(args.out, SKILL_HEADER, rows)
    return status


def _read_idf(path) -> dict:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["station"], int(row["duration_h"]), float(row["return_period_y"]), row["period"],
                   row["source_tag"], row["model_kind"])
            out[key] = ReturnLevelEstimate(float(row["return_period_y"]), float(row["q05"]), float(row["q50"]),
                                           float(row["q95"]))
    return out


def cmd_change(args) -> int:
    table = _read_idf(args.input)
    rows = []
    cells = sorted({(k[0], k[1]) for k in table})
    periods = sorted({k[2] for k in table})
    for station, d in cells:
        if args.stations and station not in args.stations:
            continue
        if args.durations and d not in args.durations:
            continue
        for case, (fk, bk) in COMPARISON_CASES.items():
            for T in periods:
                fut = table.get((station, d, T, "future", args.future_tag, fk))
                base = table.get((station, d, T, "baseline", args.baseline_tag, bk))
                if fut is None or base is None:
                    continue
                z, s5, s10 = change_z(fut, base)
                t_out = int(T) if T == int(T) else T
                rows.append([station, d, t_out, case, base.q50, fut.q50, percent_change(fut.q50, base.q50), z,
                             int(s5), int(s10)])
    _write(args.out, CHANGE_HEADER, rows)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--stations", type=_strs, default=None, help="comma-separated station ids")
    common.add_argument("--durations", type=_ints, default=None, help="comma-separated durations in hours")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="idf", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pipeline", parents=[common], help="run the full study from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("disagg-calibrate", parents=[common], help="fit cascade parameters to sub-daily data")
    s.add_argument("--input", required=True, help="depth CSV")
    s.add_argument("--resolution-s", type=int, default=3600)
    s.add_argument("--calendar", default="gregorian")
    s.add_argument("--steps", type=int, default=5)
    s.add_argument("--out", required=True, help="parameter JSON")
    s.set_defaults(func=cmd_disagg_calibrate)

    s = sub.add_parser("disagg-apply", parents=[common], help="disaggregate a daily depth CSV")
    s.add_argument("--input", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--calendar", default="gregorian")
    s.add_argument("--wet-threshold", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_disagg_apply)

    s = sub.add_parser("bias-correct", parents=[common], help="quantile-map annual maxima")
    s.add_argument("--model", required=True, help="model AM CSV to correct")
    s.add_argument("--obs", required=True, help="observed AM CSV")
    s.add_argument("--model-hist", help="historical model AM CSV (projected stage)")
    s.add_argument("--method", choices=("gev", "kde", "auto"), default="gev")
    s.add_argument("--stage", choices=("historical", "projected"), default="historical")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bias_correct)

    s = sub.add_parser("fit-gev", parents=[common], help="DE-MC posterior summaries as JSON")
    s.add_argument("--input", required=True)
    s.add_argument("--kind", choices=("stationary", "nonstationary"), default="stationary")
    s.add_argument("--sampler", help="sampler settings JSON")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_fit_gev)

    s = sub.add_parser("idf", parents=[common], help="return-level table from AM series")
    s.add_argument("--input", required=True)
    s.add_argument("--kind", choices=("stationary", "nonstationary", "both"), default="both")
    s.add_argument("--periods", type=_floats, default=list(RETURN_PERIODS_Y))
    s.add_argument("--period", default="baseline", help="label written to the period column")
    s.add_argument("--sampler")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_idf)

    s = sub.add_parser("trend", parents=[common], help="Mann-Kendall and Sen slope per series")
    s.add_argument("--input", required=True)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_trend)

    s = sub.add_parser("skill", parents=[common], help="Taylor statistics and skill score per model series")
    s.add_argument("--model", required=True)
    s.add_argument("--obs", required=True)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_skill)

    s = sub.add_parser("change", parents=[common], help="change report from an IDF table")
    s.add_argument("--input", required=True, help="IDF table CSV")
    s.add_argument("--baseline-tag", default="observed")
    s.add_argument("--future-tag", default="mm-med")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_change)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "pipeline" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (IdfError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
