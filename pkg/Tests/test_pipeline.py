import json
import math
import os

import numpy as np
import pandas as pd
import pytest

from orpf4py import Config
from orpf4py.admittance import reduce_network
from orpf4py.netmodel import load_network, load_profiles, to_per_unit
from orpf4py.objectives import INITIAL, OBJECTIVE_NAMES, WeightVector, eval_f_alpha, tune_weights
from orpf4py.pipeline import (COMBINED, PipelineError, box_stats, diagonal_violations, envelope_violations,
                              performance_row, read_interdependence, run_combined, run_family, run_interdependence,
                              sample_cases, tap_histogram, write_case_results, write_combined, write_interdependence,
                              write_report, write_summary)

DATA = os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir, "orpf4py", "data")

OBJECTIVES = ["B.U", "G.Q", "E.Q"]

# Supporting functions
def toyCases(count=4, seed=1):
    physical = load_network(os.path.join(DATA, "toy_t3.json"))
    cases = load_profiles(physical, os.path.join(DATA, "toy_profiles.csv"))
    return reduce_network(to_per_unit(physical)), [cases[k] for k in sample_cases(len(cases), count, seed)]

def syntheticFrame():
    frame = pd.DataFrame([[0.5, 0.5], [0.1, 0.4], [0.05, 0.2]], index=[INITIAL, "A", "B"], columns=["A", "B"])
    frame.index.name = "family"
    return frame

# Testing functions

def test_sample_cases():
    ids = sample_cases(96, 50, seed=42)
    assert len(ids) == 50
    assert len(set(ids)) == 50
    assert all(0 <= k < 96 for k in ids)
    assert ids == sample_cases(96, 50, seed=42)
    assert ids != sample_cases(96, 50, seed=43)
    assert sorted(sample_cases(10, 10, seed=3)) == list(range(10))
    assert sample_cases(10, 0, seed=3) == []

def test_sample_cases_legacy():
    expected = [int(k) for k in np.random.RandomState(7).choice(96, 5, replace=False)]
    assert sample_cases(96, 5, seed=7, method="numpy-legacy") == expected

def test_sample_cases_errors():
    with pytest.raises(PipelineError):
        sample_cases(5, 6)
    with pytest.raises(PipelineError):
        sample_cases(5, 2, method="mt19937")

def test_box_stats():
    stats = box_stats([1, 2, 3, 4, 5, 6, 7, 8, 9, 100])
    assert stats.count == 10
    assert stats.q1 == pytest.approx(3.25)
    assert stats.median == pytest.approx(5.5)
    assert stats.q3 == pytest.approx(7.75)
    assert stats.lower_fence == 1.0
    assert stats.upper_fence == pytest.approx(14.5)
    assert stats.maximum == 100.0
    assert stats.below_pct == 0.0
    assert stats.above_pct == pytest.approx(10.0)
    with pytest.raises(PipelineError):
        box_stats([])

def test_box_stats_outlier_below():
    stats = box_stats([0, 100, 101, 102])
    assert stats.q1 == pytest.approx(75.0)
    assert stats.lower_fence == pytest.approx(75.0 - 1.5 * 26.25)
    assert stats.upper_fence == 102.0
    assert stats.lower_fence <= stats.q1 <= stats.median <= stats.q3 <= stats.upper_fence
    assert stats.below_pct == pytest.approx(25.0)
    assert stats.above_pct == 0.0

def test_box_stats_small_samples():
    stats = box_stats([1, 2, 3, 4, 5])
    assert (stats.q1, stats.median, stats.q3) == (2.0, 3.0, 4.0)
    assert (stats.lower_fence, stats.upper_fence) == (1.0, 5.0)
    flat = box_stats([0.7] * 6)
    assert flat.q1 == flat.q3 == flat.lower_fence == flat.upper_fence == 0.7
    assert flat.below_pct == flat.above_pct == 0.0

def test_tap_histogram():
    hist = tap_histogram([9, 9, 10, 10, 10, 11])
    assert hist == pytest.approx({9: 100 / 3, 10: 50.0, 11: 100 / 6})
    assert tap_histogram([9, 9, 10, 10, 10, 11], omit_single=True) == pytest.approx({9: 100 / 3, 10: 50.0})
    assert tap_histogram([]) == {}

def test_envelope_violations():
    frame = syntheticFrame()
    row = pd.Series({"A": 0.01, "B": 0.3})
    violations = envelope_violations(row, frame)
    assert [v["objective"] for v in violations] == ["A"]
    assert violations[0]["min"] == 0.05
    assert envelope_violations(pd.Series({"A": 0.07, "B": 0.3}), frame) == []

def test_diagonal_violations():
    issues = diagonal_violations(syntheticFrame())
    assert len(issues) == 1
    assert issues[0]["objective"] == "A"
    assert issues[0]["other"] == "B"
    frame = syntheticFrame()
    frame.loc["B", "A"] = 0.2
    assert diagonal_violations(frame) == []

def test_interdependence_on_toy_grid():
    net, cases = toyCases()
    matrix, stats = run_interdependence(net, cases, OBJECTIVES, mode="relax")
    frame = matrix.frame
    assert list(frame.index) == [INITIAL] + OBJECTIVES
    assert list(frame.columns) == OBJECTIVES
    assert np.all(np.isfinite(frame.to_numpy()))
    assert matrix.failures == {INITIAL: 0, "B.U": 0, "G.Q": 0, "E.Q": 0}
    assert matrix.flagged == []
    for name in OBJECTIVES:
        assert frame.loc[name, name] <= frame.loc[INITIAL, name] + 1e-9
    assert frame.loc[INITIAL, "G.Q"] == 0.0
    assert stats.mu["B.U"] == pytest.approx(frame["B.U"].mean())
    assert stats.sigma["B.U"] == pytest.approx(frame["B.U"].std(ddof=1))
    assert [r.case_id for r in matrix.results["B.U"]] == [c.case_id for c in cases]
    single = run_combined(net, cases, {"B.U": 1.0}, mode="relax")
    assert single.row["B.U"] == pytest.approx(frame.loc["B.U", "B.U"], abs=1e-6)

def test_combined_on_toy_grid():
    net, cases = toyCases(3, seed=5)
    weights = WeightVector.from_mapping({"B.U": 10.0, "G.Q": 1.0})
    initial = run_family(net, cases, INITIAL, specs=weights.specs)
    combined = run_combined(net, cases, weights, mode="relax")
    assert combined.failures == 0
    assert combined.row.name == COMBINED
    assert set(OBJECTIVES) <= set(combined.row.index)
    assert np.all(np.isfinite(combined.row[list(OBJECTIVE_NAMES)].to_numpy()))
    assert combined.row["B.U"] < performance_row(initial, weights.specs)["B.U"]
    for before, after in zip(initial, combined.results):
        assert before.case_id == after.case_id
        assert eval_f_alpha(weights, after.f_values) <= eval_f_alpha(weights, before.f_values) + 1e-9
    threaded = run_combined(net, cases, weights, workers=2, mode="relax")
    pd.testing.assert_series_equal(threaded.row, combined.row)

def test_warm_start_matches_flat_start():
    net, cases = toyCases(6)
    flat = run_family(net, cases, INITIAL, workers=1)
    Config.setConfigVal("warm_start", True)
    try:
        warm = run_family(net, cases, INITIAL, workers=1)
    finally:
        Config.initDict()
    for a, b in zip(flat, warm):
        np.testing.assert_allclose(a.solution.vm, b.solution.vm, atol=1e-8)

def test_result_files(tmp_path):
    net, cases = toyCases(3)
    matrix, stats = run_interdependence(net, cases, ["B.U", "L.IS"], mode="heuristic")
    out = str(tmp_path)
    write_interdependence(out, matrix, stats)
    rows, readStats = read_interdependence(os.path.join(out, "interdependence.csv"))
    np.testing.assert_allclose(rows.to_numpy(), matrix.frame.to_numpy(), rtol=1e-9)
    np.testing.assert_allclose(readStats.mu.to_numpy(), stats.mu.to_numpy(), rtol=1e-9)
    radar = pd.read_csv(os.path.join(out, "radar.csv"), index_col=0)
    assert radar.to_numpy().min() >= 0.0 and radar.to_numpy().max() <= 1.0

    write_case_results(out, net, cases, matrix.results.values())
    caseTable = pd.read_csv(os.path.join(out, "cases.csv"))
    assert len(caseTable) == 3 * 3
    points = pd.read_csv(os.path.join(out, "points.csv"))
    taps = points[points["quantity"] == "tap"]["value"]
    assert all(float(v).is_integer() for v in taps)

    write_report(out)
    with open(os.path.join(out, "boxstats.json")) as f:
        doc = json.load(f)
    assert set(doc["families"]) == {INITIAL, "B.U", "L.IS"}
    assert "u_lv" in doc["families"][INITIAL]
    hist = pd.read_csv(os.path.join(out, "taps_hist.csv"))
    for _, group in hist.groupby("family"):
        assert group["percent"].sum() == pytest.approx(100.0)

    write_summary(out, [c.case_id for c in cases], {"flagged": matrix.flagged})
    with open(os.path.join(out, "summary.json")) as f:
        summary = json.load(f)
    assert summary["case_ids"] == [c.case_id for c in cases]
    assert summary["config_hash"] == Config.configHash()
    assert summary["flagged"] == []

def test_write_combined(tmp_path):
    net, cases = toyCases(2)
    combined = run_combined(net, cases, {"B.U": 1.0}, matrix=syntheticFrame(), mode="relax")
    write_combined(str(tmp_path), combined)
    frame = pd.read_csv(os.path.join(str(tmp_path), "combined_eval.csv"), index_col=0)
    assert list(frame.index) == [COMBINED]
    assert frame.loc[COMBINED, "f_alpha"] == pytest.approx(combined.f_alpha, rel=1e-9)
    assert math.isfinite(frame.loc[COMBINED, "B.U"])

def test_missing_result_files(tmp_path):
    with pytest.raises(PipelineError):
        read_interdependence(os.path.join(str(tmp_path), "interdependence.csv"))
    with pytest.raises(PipelineError):
        write_report(str(tmp_path))

def test_result_files_are_reproducible(tmp_path):
    names = ("interdependence.csv", "radar.csv", "cases.csv", "points.csv", "boxstats.json", "taps_hist.csv",
             "summary.json")
    runs = []
    for run in ("first", "second"):
        net, cases = toyCases(3, seed=42)
        matrix, stats = run_interdependence(net, cases, ["B.U", "G.Q"], mode="heuristic")
        out = tmp_path / run
        out.mkdir()
        write_interdependence(str(out), matrix, stats)
        write_case_results(str(out), net, cases, matrix.results.values())
        write_report(str(out))
        write_summary(str(out), [c.case_id for c in cases])
        runs.append(out)
    for name in names:
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()

def test_tuned_combination_stays_in_envelope():
    net, cases = toyCases(50, seed=42)
    matrix, stats = run_interdependence(net, cases)
    alpha = tune_weights(Config.getConfigVal("tilde_alpha"), stats.mu.to_dict())
    combined = run_combined(net, cases, alpha, matrix)
    assert combined.violations == []
    assert np.all(np.isfinite(combined.row[list(OBJECTIVE_NAMES)].to_numpy()))
    assert combined.row["B.U"] < matrix.frame.loc[INITIAL, "B.U"]
