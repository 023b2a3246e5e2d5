import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from isocal.cli import main
from isocal.data import SurvivalDataset, load_dataset, load_surface, save_dataset

SPLIT = "300,300,600"


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(*argv):
    return main(["-q", *map(str, argv)])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Simulate, fit both models and calibrate with DR and RW once."""
    d = tmp_path_factory.mktemp("pipe")
    assert run("simulate", "--setting", 2, "--split", SPLIT, "--seed", 0, "--out", d) == 0
    assert run("fit", "--data", d / "train.csv", "--predict-on", d / "cal.csv",
               "--predict-risks-out", d / "cal_risks.csv", "--grid-out", d / "S_cal.json",
               "--grid-density", 200, "--out", d / "event.json") == 0
    assert run("fit", "--role", "censoring", "--data", d / "train.csv",
               "--predict-on", d / "cal.csv", "--grid-out", d / "G_cal.json",
               "--times-from", d / "S_cal.json", "--out", d / "censor.json") == 0
    for method in ("dr", "rw"):
        extra = ["--s-hat", d / "S_cal.json"] if method == "dr" else []
        assert run("calibrate", "--method", method, "--data", d / "cal.csv",
                   "--risks", d / "cal_risks.csv", "--g-hat", d / "G_cal.json", *extra,
                   "--out", d / f"{method}.json") == 0
    return d


def test_simulate_writes_n_rows_and_is_repeatable(tmp_path):
    for sub in ("a", "b"):
        assert run("simulate", "--setting", 1, "--n", 10, "--seed", 0, "--out", tmp_path / sub) == 0
    a = (tmp_path / "a" / "data.csv").read_bytes()
    assert a == (tmp_path / "b" / "data.csv").read_bytes()
    assert len(read_rows(tmp_path / "a" / "data.csv")) == 10
    assert len(read_rows(tmp_path / "a" / "data_truths.csv")) == 10


def test_simulate_rejects_unknown_setting(tmp_path, capsys):
    assert run("simulate", "--setting", 7, "--n", 10, "--out", tmp_path / "x") == 1
    assert "--setting" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_simulate_split_sizes(tmp_path):
    assert run("simulate", "--setting", 3, "--split", "5,6,7", "--out", tmp_path) == 0
    assert [len(read_rows(tmp_path / f"{p}.csv")) for p in ("train", "cal", "test")] == [5, 6, 7]
    assert run("simulate", "--setting", 3, "--n", 10, "--split", "5,6,7", "--out", tmp_path) == 1


def test_fit_converges_and_records_ridge(pipeline, tmp_path, capsys):
    doc = json.loads((pipeline / "event.json").read_text())
    assert doc["iterations"] <= 20
    assert run("fit", "--data", pipeline / "train.csv", "--ridge", 0.01,
               "--out", tmp_path / "m.json") == 0
    assert json.loads((tmp_path / "m.json").read_text())["ridge"] == 0.01
    assert "iterations" in capsys.readouterr().out


def test_censoring_fit_without_censored_subjects_fails(tmp_path, capsys):
    d = SurvivalDataset([1.0, 2.0, 3.0], [1, 1, 1], covariates=[[0.1], [0.5], [0.2]])
    save_dataset(d, tmp_path / "d.csv")
    code = run("fit", "--role", "censoring", "--data", tmp_path / "d.csv",
               "--out", tmp_path / "m.json")
    assert code != 0
    assert capsys.readouterr().err.strip()
    assert not (tmp_path / "m.json").exists()


def test_separable_data_is_a_numeric_failure(tmp_path):
    d = SurvivalDataset([1.0, 2.0, 3.0, 4.0], [1, 1, 1, 1],
                        covariates=[[0.03], [0.02], [0.01], [0.0]])
    save_dataset(d, tmp_path / "d.csv")
    assert run("fit", "--data", tmp_path / "d.csv", "--out", tmp_path / "m.json") == 3


def test_malformed_dataset_is_a_data_error(tmp_path, capsys):
    (tmp_path / "d.csv").write_text("id,time,event,x1\na,1.0,1,0.5\nb,-2,0,0.1\n")
    assert run("fit", "--data", tmp_path / "d.csv", "--out", tmp_path / "m.json") == 2
    assert "3" in capsys.readouterr().err


def test_calibrate_dr_requires_survival_grid(pipeline, tmp_path, capsys):
    code = run("calibrate", "--method", "dr", "--data", pipeline / "cal.csv",
               "--risks", pipeline / "cal_risks.csv", "--g-hat", pipeline / "G_cal.json",
               "--out", tmp_path / "s.json")
    assert code == 1
    assert "--s-hat" in capsys.readouterr().err
    assert not (tmp_path / "s.json").exists()


def test_calibrated_surfaces_are_valid_and_repeatable(pipeline, tmp_path):
    for method in ("rw", "dr"):
        s = load_surface(pipeline / f"{method}.json")
        assert s.method == method.upper()
        assert np.diff(s.surface, axis=1).max() <= 1e-12
        assert np.diff(s.surface, axis=0).max() <= 1e-12
        assert s.surface.min() >= 0 and s.surface.max() <= 1
    assert run("calibrate", "--method", "rw", "--data", pipeline / "cal.csv",
               "--risks", pipeline / "cal_risks.csv", "--g-hat", pipeline / "G_cal.json",
               "--out", tmp_path / "rw.json") == 0
    assert (tmp_path / "rw.json").read_bytes() == (pipeline / "rw.json").read_bytes()


def test_evaluate_writes_json_and_csv(pipeline, tmp_path):
    out = tmp_path / "ev"
    assert run("evaluate", "--surface", pipeline / "dr.json", "--surface", pipeline / "rw.json",
               "--model", pipeline / "event.json", "--test", pipeline / "test.csv",
               "--censor-model", pipeline / "censor.json", "--truths", pipeline / "test_truths.csv",
               "--modes", "ipcw,oracle", "--dataset", "s2", "--out", out) == 0
    rows = read_rows(out / "metrics.csv")
    assert {(r["method"], r["mode"]) for r in rows} == {
        (m, mode) for m in ("cox", "dr", "rw") for mode in ("ipcw", "oracle")}
    assert all(r["dataset"] == "s2" for r in rows)
    doc = json.loads((out / "dr.json").read_text())
    assert {d["mode"] for d in doc} == {"ipcw", "oracle"}
    assert set(doc[0]["quantile_scores"]) == {f"0.{k}" for k in range(1, 10)}
    # the same inputs give the same bytes
    assert run("evaluate", "--surface", pipeline / "dr.json", "--surface", pipeline / "rw.json",
               "--model", pipeline / "event.json", "--test", pipeline / "test.csv",
               "--censor-model", pipeline / "censor.json", "--truths", pipeline / "test_truths.csv",
               "--modes", "ipcw,oracle", "--dataset", "s2", "--out", tmp_path / "ev2") == 0
    assert (out / "metrics.csv").read_bytes() == (tmp_path / "ev2" / "metrics.csv").read_bytes()


def test_evaluate_oracle_mode_needs_no_censoring_input(pipeline, tmp_path):
    assert run("evaluate", "--surface", pipeline / "dr.json", "--model", pipeline / "event.json",
               "--test", pipeline / "test.csv", "--truths", pipeline / "test_truths.csv",
               "--modes", "oracle", "--out", tmp_path) == 0
    assert run("evaluate", "--surface", pipeline / "dr.json", "--model", pipeline / "event.json",
               "--test", pipeline / "test.csv", "--modes", "ipcw", "--out", tmp_path / "x") == 1


def _write_surface(path, method, rows):
    path.write_text(json.dumps({"method": method, "risks": [0.0, 1.0], "times": [1.0, 2.0],
                                "surface": rows, "t_max": 2.0}))


def test_empty_quantile_intersection_is_null(tmp_path):
    # only the high-risk subject reaches S <= 0.1 under A, nobody does under B
    _write_surface(tmp_path / "a.json", "RW", [[0.95, 0.95], [0.05, 0.05]])
    _write_surface(tmp_path / "b.json", "DR", [[0.95, 0.95], [0.95, 0.95]])
    save_dataset(SurvivalDataset([1.5, 1.5], [1, 1], subject_id=["lo", "hi"]), tmp_path / "t.csv")
    (tmp_path / "r.csv").write_text("id,risk\nlo,0\nhi,1\n")
    (tmp_path / "truth.csv").write_text("id,true_time\nlo,1.5\nhi,1.5\n")
    assert run("evaluate", "--surface", f"a={tmp_path / 'a.json'}",
               "--surface", f"b={tmp_path / 'b.json'}", "--test", tmp_path / "t.csv",
               "--test-risks", tmp_path / "r.csv", "--truths", tmp_path / "truth.csv",
               "--modes", "oracle", "--taus", "0.05,0.9", "--out", tmp_path / "ev") == 0
    for name in ("a", "b"):
        qs = json.loads((tmp_path / "ev" / f"{name}.json").read_text())[0]["quantile_scores"]
        assert qs["0.9"]["score"] is None
        assert qs["0.05"]["score"] is not None
    rows = read_rows(tmp_path / "ev" / "metrics.csv")
    assert all(r["qs_0.9"] == "" for r in rows)


def _metric_file(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def test_report_constant_metrics_have_zero_spread(tmp_path):
    rows = [{"dataset": "d", "seed": s, "method": "DR", "mode": "oracle", "ibs": "1.0",
             "qs_0.1": "1.0"} for s in range(100)]
    _metric_file(tmp_path / "m.csv", rows)
    assert run("report", tmp_path) == 0
    (entry,) = read_rows(tmp_path / "summary.csv")
    assert float(entry["ibs"]) == 1.0 and float(entry["ibs_2se"]) == 0.0
    assert entry["n_seeds"] == "100"
    assert (tmp_path / "summary.txt").read_text().strip()


def test_report_groups_methods_and_orders_columns(tmp_path):
    for seed in range(3):
        rows = [{"dataset": "d", "seed": seed, "method": m, "mode": "ipcw",
                 "ibs": str(0.1 * seed + k), "qs_0.1": "1", "qs_0.5": "2", "qs_0.9": "3"}
                for k, m in enumerate(("cox", "DR"))]
        _metric_file(tmp_path / f"s{seed}.csv", rows)
    out = tmp_path / "rep"
    assert run("report", tmp_path, "--out", out) == 0
    summary = read_rows(out / "summary.csv")
    assert [e["method"] for e in summary] == ["cox", "DR"]
    np.testing.assert_allclose([float(e["ibs"]) for e in summary], [0.1, 1.1])
    header = next(csv.reader(open(out / "summary.csv")))
    assert header[4:] == ["ibs", "ibs_2se", "qs_0.1", "qs_0.1_2se", "qs_0.5", "qs_0.5_2se",
                          "qs_0.9", "qs_0.9_2se"]


def test_report_on_empty_directory_fails(tmp_path, capsys):
    assert run("report", tmp_path) == 1
    assert "no metric" in capsys.readouterr().err


def test_experiment_is_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert run("experiment", "--setting", 2, "--seeds", "0-1", "--split", "200,200,400",
                   "--grid-density", 150, "--modes", "oracle,ipcw", "--out", tmp_path / sub) == 0
    for seed in (0, 1):
        name = f"setting2_seed{seed}.csv"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        rows = read_rows(tmp_path / "a" / name)
        assert {r["method"] for r in rows} == {"cox", "dr"}
    assert run("experiment", "--setting", 9, "--out", tmp_path / "c") == 1


def test_thread_variable_is_validated(tmp_path, monkeypatch):
    monkeypatch.setenv("ISOCAL_THREADS", "zero")
    assert run("experiment", "--setting", 2, "--split", "50,50,50", "--out", tmp_path) == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "isocal.cli", "simulate", "--setting", "4",
                           "--n", "5", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert load_dataset(tmp_path / "data.csv").n == 5
