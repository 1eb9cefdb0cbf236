import json
import os

import pandas as pd
import pytest

from orpf4py import Config
from orpf4py.cli import main

DATA = os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir, "orpf4py", "data")
T3 = os.path.join(DATA, "toy_t3.json")
PROFILES = os.path.join(DATA, "toy_profiles.csv")
PUBLISHED = os.path.join(DATA, "published_interdependence.csv")

# Supporting functions
@pytest.fixture(autouse=True)
def resetConfig():
    yield
    Config.initDict()

def runJson(capsys, argv):
    code = main(argv)
    captured = capsys.readouterr()
    return code, json.loads(captured.out) if captured.out.strip() else None, captured.err

def errorDoc(err):
    return json.loads(err.strip().splitlines()[-1])

# Testing functions

def test_validate(capsys):
    code, doc, _ = runJson(capsys, ["validate", "--net", T3])
    assert code == 0
    assert doc["valid"] is True
    assert doc["cases"] == 1
    code, doc, _ = runJson(capsys, ["validate", "--net", T3, "--profiles", PROFILES])
    assert doc["cases"] == 96

def test_usage_error(capsys):
    code, _, err = runJson(capsys, ["validate", "--net", T3, "--bogus"])
    assert code == 2
    assert errorDoc(err)["error"] == "UsageError"
    code, _, _ = runJson(capsys, ["frobnicate"])
    assert code == 2

def test_missing_network(capsys, tmp_path):
    code, _, err = runJson(capsys, ["validate", "--net", str(tmp_path / "none.json")])
    assert code == 1
    doc = errorDoc(err)
    assert doc["error"] == "NetworkError"
    assert "none.json" in doc["message"]

def test_invalid_network(capsys, tmp_path):
    with open(T3) as f:
        document = json.load(f)
    document["lines"][0]["to_bus"] = 7
    path = tmp_path / "broken.json"
    path.write_text(json.dumps(document))
    code, _, err = runJson(capsys, ["validate", "--net", str(path)])
    assert code == 1
    assert errorDoc(err)["element_id"] == "L1"

def test_powerflow(capsys, tmp_path):
    solution = tmp_path / "pf.json"
    ybus = tmp_path / "ybus.csv"
    code, doc, _ = runJson(capsys, ["powerflow", "--net", T3, "--dump-solution", str(solution),
                                    "--dump-ybus", str(ybus)])
    assert code == 0
    assert doc["max_mismatch"] < 1e-8
    assert doc["vm_pu"]["0"] == pytest.approx(1.02)
    assert json.loads(solution.read_text()) == doc
    assert pd.read_csv(str(ybus), index_col=0).shape == (3, 6)

def test_optimize_heuristic(capsys, tmp_path):
    nlpFile = tmp_path / "nlp.txt"
    code, doc, _ = runJson(capsys, ["optimize", "--net", T3, "--objective", "B.U", "--taps", "heuristic",
                                    "--dump-nlp", str(nlpFile)])
    assert code == 0
    assert doc["status"] == "optimal"
    assert doc["solves"] == 2
    assert doc["fixed_order"] == ["T1"]
    assert float(doc["taps"]["T1"]).is_integer()
    assert doc["kkt"]["stationarity"] <= 1e-6
    assert nlpFile.read_text().startswith("[variables]")

def test_optimize_case_out_of_range(capsys):
    code, _, err = runJson(capsys, ["optimize", "--net", T3, "--objective", "B.U", "--case", "3"])
    assert code == 1
    assert errorDoc(err)["error"] == "PipelineError"

def test_tune_weights(capsys, tmp_path):
    out = tmp_path / "weights.json"
    code, doc, _ = runJson(capsys, ["tune-weights", "--stats", PUBLISHED,
                                    "--tilde", "B.U=10,G.Q=5,E.Q=5,slack.P=1,L.IS=0", "--out", str(out)])
    assert code == 0
    assert doc["alpha"]["B.U"] == pytest.approx(183.39, rel=1e-4)
    assert doc["alpha"]["L.IS"] == 0.0
    stored = json.loads(out.read_text())
    assert stored["format_version"] == 1
    assert stored["tilde"]["G.Q"] == 5.0

def test_optimize_with_weights_file(capsys, tmp_path):
    weights = tmp_path / "weights.json"
    weights.write_text(json.dumps({"format_version": 1, "alpha": {"B.U": 2.0, "G.Q": 1.0}}))
    code, doc, _ = runJson(capsys, ["optimize", "--net", T3, "--weights", str(weights), "--taps", "relax"])
    assert code == 0
    assert doc["weights"] == {"B.U": 2.0, "G.Q": 1.0}
    assert set(doc["f_values"]) == {"B.U", "G.Q"}

def test_interdependence_and_report(capsys, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"objectives": ["B.U", "G.Q"]}))
    out = tmp_path / "run"
    code, doc, _ = runJson(capsys, ["interdependence", "--net", T3, "--profiles", PROFILES, "--config", str(config),
                                    "--count", "2", "--taps", "relax", "--out", str(out)])
    assert code == 0
    assert doc["cases"] == 2
    for name in ("interdependence.csv", "radar.csv", "cases.csv", "points.csv", "boxstats.json",
                 "taps_hist.csv", "summary.json"):
        assert (out / name).is_file()
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["case_ids"]) == 2
    assert summary["config"]["objectives"] == ["B.U", "G.Q"]

    report = tmp_path / "report"
    code, doc, _ = runJson(capsys, ["report", "--results", str(out), "--out", str(report), "--omit-single"])
    assert code == 0
    assert doc["written"] == ["boxstats.json", "taps_hist.csv", "radar.csv"]
    assert (report / "radar.csv").is_file()

def test_interdependence_needs_profiles(capsys, tmp_path):
    code, _, err = runJson(capsys, ["interdependence", "--net", T3, "--out", str(tmp_path)])
    assert code == 1
    assert "--profiles" in errorDoc(err)["message"]

def test_optimize_exhaustive_reports_gap(capsys):
    code, doc, _ = runJson(capsys, ["optimize", "--net", T3, "--objective", "B.U", "--taps", "exhaustive"])
    assert code == 0
    assert doc["solves"] == 5
    gap = doc["tap_gap"]
    assert gap["relative_gap"] >= -1e-6
    assert gap["exhaustive"] == pytest.approx(doc["objective"])
    assert gap["heuristic_solves"] == 2

def test_profiles(capsys, tmp_path):
    out = tmp_path / "profiles.csv"
    code, doc, _ = runJson(capsys, ["profiles", "--net", T3, "--seed", "7", "--out", str(out)])
    assert code == 0
    assert doc["steps"] == 96
    assert doc["seed"] == 7
    assert len(pd.read_csv(out)) == 96
    code, doc, _ = runJson(capsys, ["validate", "--net", T3, "--profiles", str(out)])
    assert code == 0
    assert doc["cases"] == 96
