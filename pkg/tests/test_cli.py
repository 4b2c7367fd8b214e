import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from paramgate.cli import main, parse_circuit, parse_pair
from paramgate.experiments import save_calibrations


@pytest.fixture(scope="module")
def cal_file(tmp_path_factory, cals):
    path = tmp_path_factory.mktemp("cal") / "cal.json"
    save_calibrations(cals, path)
    return path


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


def run_dir(result) -> Path:
    return Path(result.output.splitlines()[0])


def test_parse_helpers():
    assert parse_pair("Q0,Q1") == (0, 1)
    assert parse_circuit("h 0; cz 0 1") == [("h", 0), ("cz", 0, 1)]


def test_version_and_help():
    assert invoke("--version").exit_code == 0
    assert "qpt-gate" in invoke("--help").output


def test_predict_reports_gate():
    res = invoke("predict", "--pair", "Q0,Q1", "--phi-p", 0.2)
    assert res.exit_code == 0
    data = json.loads(res.output)
    assert data["g_eff_mhz"] > 0 and data["f_mod_flux_mhz"] > 0


def test_predict_bad_pair_is_click_error():
    res = CliRunner().invoke(main, ["predict", "--pair", "Q0,Q5", "--phi-p", "0.2"])
    assert res.exit_code != 0


def test_curves_csv(tmp_path):
    out = tmp_path / "curves.csv"
    res = invoke("curves", "--points", 3, "--kind", "cz02", "--out", out)
    assert res.exit_code == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 3
    assert {r["kind"] for r in rows} == {"cz02"}


def test_chevron_small_grid():
    res = invoke("chevron", "--f-points", 3, "--duration-points", 4, "--max-duration", 100)
    assert res.exit_code == 0
    rows = list(csv.reader(io.StringIO(res.output)))
    assert len(rows) == 1 + 12
    p = np.array([[float(x) for x in r[2:]] for r in rows[1:]])
    assert np.all(p >= -1e-9) and np.all(p <= 1 + 1e-9)


def test_calibrate_single_pair(tmp_path):
    out = tmp_path / "cal.json"
    res = invoke("calibrate", "--pair", "Q0,Q1", "--out", out)
    assert res.exit_code == 0
    data = json.loads(out.read_text())
    assert len(data) == 1


def test_run_noise_free_bell(cal_file):
    res = invoke("run", "--circuit", "ry 0 1.5707963; ry 1 1.5707963; cz 0 1; ry 1 -1.5707963",
                 "--calibration", cal_file, "--no-noise")
    assert res.exit_code == 0
    pops = json.loads(res.output)["qubit_populations"]
    assert pops["00"] + pops["11"] == pytest.approx(1.0, abs=0.01)


def test_readout_train_and_eval(tmp_path):
    clf = tmp_path / "clf.json"
    shots = tmp_path / "shots.csv"
    res = invoke("readout-train", "--qubits", "0", "--shots", 500, "--save-shots", shots, "--out", clf)
    assert res.exit_code == 0 and shots.exists()
    res = invoke("readout-eval", "--classifier", clf, "--shots", 500)
    assert res.exit_code == 0
    data = json.loads(res.output)
    assert 0.9 < data["metrics"][0]["assignment_fidelity"] <= 1.0


def test_qpt_gate_then_offline_tomography(tmp_path, cal_file):
    res = invoke("qpt-gate", "--calibration", cal_file, "--shots", 300, "--seed", 3, "--out", tmp_path,
                 "--constraints", "tp")
    assert res.exit_code == 0
    d = run_dir(res)
    summary = json.loads((d / "summary.json").read_text())
    assert summary["seed"] == 3 and summary["experiment"] == "qpt-gate"
    assert (d / "raw" / "ptm.csv").exists()
    for c in ("none", "tp", "cptp"):
        again = invoke("qpt", d / "raw" / "record.json", "--constraints", c)
        assert again.exit_code == 0
        assert f"constraints={c}" in again.output
    wrong = CliRunner().invoke(main, ["qst", str(d / "raw" / "record.json")])
    assert wrong.exit_code != 0


def test_qpt_gate_runs_are_reproducible(tmp_path, cal_file):
    a = run_dir(invoke("qpt-gate", "--calibration", cal_file, "--shots", 100, "--out", tmp_path))
    b = run_dir(invoke("qpt-gate", "--calibration", cal_file, "--shots", 100, "--out", tmp_path))
    assert a != b
    assert (a / "raw" / "counts.csv").read_text() == (b / "raw" / "counts.csv").read_text()


def test_ghz_record_feeds_qst(tmp_path, cal_file):
    res = invoke("ghz", "--calibration", cal_file, "--shots", 50, "--out", tmp_path, "--no-noise")
    assert res.exit_code == 0
    d = run_dir(res)
    qst = invoke("qst", d / "raw" / "record.json", "--constraints", "none")
    assert qst.exit_code == 0 and "fidelity=" in qst.output


def test_drift_linear_estimate(tmp_path):
    res = invoke("drift", "--no-simulate", "--out", tmp_path)
    assert res.exit_code == 0
    summary = json.loads((run_dir(res) / "summary.json").read_text())
    assert summary["result"]["linear_estimate"] == pytest.approx(0.0417, abs=1e-4)


def test_budget_exact_ideal(tmp_path, cal_file):
    res = invoke("budget", "--calibration", cal_file, "--exact", "--ideal", "--out", tmp_path)
    assert res.exit_code == 0
    summary = json.loads((run_dir(res) / "summary.json").read_text())
    assert summary["parameters"]["shots"] is None
    assert "residual_zz" in summary["result"]["entries"]


def test_missing_calibration_exits_2(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("[]")
    res = CliRunner().invoke(main, ["qpt-gate", "--calibration", str(path), "--out", str(tmp_path)])
    assert res.exit_code == 2
    assert "calibration" in res.output


def test_bad_device_file(tmp_path):
    bad = tmp_path / "dev.yaml"
    bad.write_text("qubits: 3\n")
    res = CliRunner().invoke(main, ["predict", "--device", str(bad), "--pair", "Q0,Q1", "--phi-p", "0.2"])
    assert res.exit_code != 0
    assert "device config" in res.output
