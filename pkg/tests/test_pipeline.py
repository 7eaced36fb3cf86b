import csv
import dataclasses
import json
import logging

import numpy as np
import pytest
from scipy.integrate import trapezoid

from idfstudy.data import AnnualMaxSeries
from idfstudy.errors import ContractError, ValidationError
from idfstudy.gev import gev_quantile
from idfstudy.inference import SamplerConfig
from idfstudy.pipeline import (COMPARISON_CASES, StudyConfig, StationInput, ModelInput, analyse_cell,
                               emit_density_data, run_pipeline)
from synthetic import write_station, write_study

FAST = {"iterations": 1000, "max_iterations": 2000}


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _station(sid="A"):
    return StationInput(sid, "obs.csv", (ModelInput("m", "m.csv"),))


# ---------------------------------------------------------------- configuration


def test_config_defaults_and_validation():
    cfg = StudyConfig((_station(),))
    assert cfg.baseline_window == (1970, 2010) and cfg.future_window == (2030, 2070)
    assert cfg.return_periods_y == (2, 5, 10, 25, 50)
    with pytest.raises(ContractError):
        StudyConfig((_station(),), baseline_window=(1990, 2010))
    with pytest.raises(ContractError):
        StudyConfig((_station(),), future_window=(2000, 2040))
    with pytest.raises(ContractError):
        StudyConfig((_station(),), durations_h=(3,))
    with pytest.raises(ContractError):
        StudyConfig((_station(),), return_periods_y=(1,))
    with pytest.raises(ContractError):
        StudyConfig((_station(), _station()))
    with pytest.raises(ContractError):
        StudyConfig((_station(),), bias_method="linear")


def test_config_json_round_trip(tmp_path):
    doc = {"stations": [{"id": "A", "obs_hourly": "a.csv", "models": {"m1": {"daily": "m1.csv"}}}],
           "durations_h": [24, 1], "master_seed": 9, "sampler": FAST}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    cfg = StudyConfig.load(path)
    assert cfg.durations_h == (1, 24) and cfg.master_seed == 9
    assert cfg.stations[0].obs_hourly == str(tmp_path / "a.csv")
    assert cfg.sampler.iterations == 1000
    again = StudyConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    sub = cfg.select(durations=[24], seed=3)
    assert sub.durations_h == (24,) and sub.master_seed == 3
    with pytest.raises(ContractError):
        cfg.select(stations=["nope"])
    with pytest.raises(ValidationError):
        StudyConfig.from_dict({**doc, "colour": "red"})


# ---------------------------------------------------------------- density curves


def test_density_normalisation_and_identity(rng):
    a = rng.gamma(4, 5, 60)
    out = emit_density_data({"a": a, "b": a.copy(), "c": rng.normal(40, 3, 40)})
    x = out["x"]
    assert x.size == 256
    for name in ("a", "b", "c"):
        assert trapezoid(out[name], x) == pytest.approx(1.0, abs=0.01)
    np.testing.assert_array_equal(out["a"], out["b"])


def test_density_bimodal_and_skips(rng, caplog):
    mix = np.r_[rng.normal(0, 1, 300), rng.normal(12, 1, 300)]
    with caplog.at_level(logging.WARNING):
        out = emit_density_data({"mix": mix, "short": [1.0, 2, 3], "flat": np.full(10, 4.0)})
    assert set(out) == {"x", "mix"}
    assert len(caplog.records) == 2
    d = out["mix"]
    peaks = np.flatnonzero((d[1:-1] > d[:-2]) & (d[1:-1] > d[2:]))
    assert peaks.size == 2
    assert emit_density_data({"short": [1.0]}) == {}


# ---------------------------------------------------------------- null analysis cell


def test_identical_inputs_give_no_change():
    years_b = np.arange(1970, 2011)
    rng = np.random.default_rng(4)
    obs_vals = gev_quantile(rng.random(years_b.size), 20.0, 5.0, 0.1)
    obs = AnnualMaxSeries("N", 24, years_b, obs_vals, "observed")
    years = np.arange(1970, 2071)
    vals = np.empty(years.size)
    vals[:41] = obs_vals
    vals[41:60] = obs_vals[:19]
    vals[60:] = obs_vals
    models = {m: AnnualMaxSeries("N", 24, years, vals, f"model:{m}") for m in ("a", "b")}
    cfg = StudyConfig((_station("N"),), durations_h=(24,), sampler=SamplerConfig.from_dict(FAST), master_seed=1)
    res = analyse_cell(cfg, "N", 24, obs, models)
    assert not res.failures
    assert len(res.change) == 3 * 5
    for row in res.change:
        pct, s5, s10 = row[6], row[8], row[9]
        assert abs(pct) < 5.0, row
        assert (s5, s10) == (0, 0), row
    for row in res.skill:
        if row[3] != "raw":
            assert row[-1] == pytest.approx(1.0, abs=1e-6)


# ---------------------------------------------------------------- end-to-end runs


@pytest.fixture(scope="module")
def base_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    cfg = StudyConfig.load(write_study(root / "in", 1, seed=3, sampler=FAST)).select(durations=[1, 24])
    s1 = run_pipeline(cfg, root / "out1")
    s2 = run_pipeline(cfg, root / "out2")
    return root, s1, s2


def test_outputs_present_and_deterministic(base_runs):
    root, s1, s2 = base_runs
    assert s1.exit_code == 0 and s1.failed_cells == []
    assert set(s1.files) >= {"idf_table.csv", "change_report.csv", "skill.csv", "trend.csv", "density.csv",
                             "run_summary.json"}
    for name in s1.files:
        assert (root / "out1" / name).read_bytes() == (root / "out2" / name).read_bytes(), name
    summary = json.loads((root / "out1" / "run_summary.json").read_text())
    assert summary["master_seed"] == 3


def test_idf_table_invariants(base_runs):
    root = base_runs[0]
    rows = _rows(root / "out1" / "idf_table.csv")
    keys = [(r["station"], r["duration_h"], r["return_period_y"], r["period"], r["source_tag"], r["model_kind"])
            for r in rows]
    assert len(keys) == len(set(keys))
    groups = {}
    for r in rows:
        q05, q50, q95 = float(r["q05"]), float(r["q50"]), float(r["q95"])
        assert q05 <= q50 <= q95
        groups.setdefault(tuple(r[k] for k in ("station", "duration_h", "period", "source_tag", "model_kind")),
                          []).append((float(r["return_period_y"]), q50))
    for g in groups.values():
        q = [v for _, v in sorted(g)]
        assert all(b >= a for a, b in zip(q, q[1:]))
    tags = {r["source_tag"] for r in rows}
    assert {"observed", "mm-min", "mm-med", "mm-max"} <= tags


def test_change_report_cases(base_runs):
    root = base_runs[0]
    rows = _rows(root / "out1" / "change_report.csv")
    assert len(rows) == len(COMPARISON_CASES) * 2 * 5
    assert {r["comparison_case"] for r in rows} == set(COMPARISON_CASES)
    for r in rows:
        pct = 100 * (float(r["future_q50"]) - float(r["baseline_q50"])) / float(r["baseline_q50"])
        assert float(r["percent_change"]) == pytest.approx(pct, rel=1e-9)


def test_other_tables(base_runs):
    root = base_runs[0]
    trend = _rows(root / "out1" / "trend.csv")
    assert {r["series"] for r in trend} == {"observed:baseline", "mm-med:baseline", "mm-med:future"}
    skill = _rows(root / "out1" / "skill.csv")
    assert {r["series"] for r in skill} >= {"model:rcm-a", "mm-med"}
    dens = _rows(root / "out1" / "density.csv")
    assert len(dens) % 256 == 0
    cascade = json.loads((root / "out1" / "cascade_params.json").read_text())
    assert "ST00" in cascade


def test_future_shift_raises_projected_levels(base_runs, tmp_path):
    """Same generator draws with the future scaled by 1.2: projected levels rise about 20% at every T."""
    root = base_runs[0]
    cfg = StudyConfig.load(write_study(tmp_path / "in", 1, seed=3, sampler=FAST, future_factor=1.2)).select(
        durations=[1, 24])
    assert run_pipeline(cfg, tmp_path / "out").exit_code == 0
    ref = _rows(root / "out1" / "change_report.csv")
    up = _rows(tmp_path / "out" / "change_report.csv")
    for a, b in zip(ref, up):
        assert a["baseline_q50"] == b["baseline_q50"]
        ratio = float(b["future_q50"]) / float(a["future_q50"])
        assert 1.1 < ratio < 1.3
        assert float(b["percent_change"]) > float(a["percent_change"])


def test_single_member_shift_is_positive(tmp_path):
    """With one member and a +20% future, every comparison reports an increase."""
    entry = write_station(tmp_path, "S1", 11, models=(("rcm", 1.0),), future_factor=1.2)
    cfg = StudyConfig.from_dict({"stations": [entry], "durations_h": [24], "sampler": FAST}, tmp_path)
    assert run_pipeline(cfg, tmp_path / "out").exit_code == 0
    rows = _rows(tmp_path / "out" / "change_report.csv")
    assert rows and all(float(r["percent_change"]) > 0 for r in rows)


def test_failed_station_is_isolated(tmp_path):
    path = write_study(tmp_path / "in", 2, seed=5, sampler=FAST)
    doc = json.loads(path.read_text())
    broken = tmp_path / "in" / doc["stations"][1]["models"]["rcm-b"]["daily"]
    broken.write_text("year,day,depth\nnot,a,number\n")
    cfg = StudyConfig.load(path).select(durations=[24])
    summary = run_pipeline(cfg, tmp_path / "out")
    assert summary.exit_code == 2
    assert summary.failed_cells == [{"station": "ST01", "duration_h": 24}]
    stations = {r["station"] for r in _rows(tmp_path / "out" / "idf_table.csv")}
    assert stations == {"ST00"}
    report = json.loads((tmp_path / "out" / "run_summary.json").read_text())
    assert report["failures"][0]["stage"] == "prepare"


def test_worker_count_does_not_change_results(tmp_path):
    cfg = StudyConfig.load(write_study(tmp_path / "in", 2, seed=4, sampler=FAST)).select(durations=[24])
    a = run_pipeline(cfg, tmp_path / "a")
    b = run_pipeline(dataclasses.replace(cfg, workers=2), tmp_path / "b")
    assert a.exit_code == b.exit_code == 0
    for name in a.files:
        if name != "run_summary.json":
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
