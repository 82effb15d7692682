import json
import subprocess
import sys

import pytest

from mot3d.cli import main


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(out), "--seed", "5"]) == 0
    return out


def test_simulate_writes_files(simulated):
    det = (simulated / "detections.jsonl").read_text().splitlines()
    gt = (simulated / "gt.jsonl").read_text().splitlines()
    assert det and gt
    assert {"frame", "pos", "pos_cov", "feat"} <= set(json.loads(det[0]))


def test_simulate_without_covariances(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--seed", "5", "--no-cov", "--operating-point", "high"]) == 0
    assert "pos_cov" not in json.loads((tmp_path / "detections.jsonl").read_text().splitlines()[0])


def test_lambda_zero_output_equals_feature_free(simulated, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    det = str(simulated / "detections.jsonl")
    assert main(["track", det, "--lambda", "0", "--out", str(a)]) == 0
    assert main(["track", det, "--lambda", "0", "--feat-gate", "0.01", "--out", str(b), "--no-features"]) == 0
    assert (a / "trajectories.jsonl").read_bytes() == (b / "trajectories.jsonl").read_bytes()


def test_track_random_order_and_features(simulated, tmp_path):
    det = str(simulated / "detections.jsonl")
    assert main(["track", det, "--lambda", "1", "--feat-gate", "0.2", "--order", "random", "--seed", "3",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "trajectories.jsonl").stat().st_size > 0


def test_eval_ground_truth_against_itself(simulated, tmp_path, capsys):
    gt = str(simulated / "gt.jsonl")
    assert main(["eval", gt, gt, "--out", str(tmp_path)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["hota"] == report["mota"] == 100.0
    assert report["idsw"] == 0
    assert json.loads((tmp_path / "metrics.json").read_text()) == report
    header, values = (tmp_path / "metrics.csv").read_text().splitlines()
    assert dict(zip(header.split(","), values.split(",")))["hota"] == "100.00"


def test_calibrate_gate(simulated, tmp_path, capsys):
    assert main(["calibrate-gate", str(simulated / "detections.jsonl"), "--out", str(tmp_path)]) == 0
    gate = float(capsys.readouterr().out)
    doc = json.loads((tmp_path / "gate.json").read_text())
    assert doc["feat_gate"] == pytest.approx(gate, abs=1e-6) and 0 <= gate <= 2


def test_malformed_input_reports_file_and_line(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"frame": 0, "pos": [0, 0, 0], "feat": [1, 0]}\n{"frame": 1, "pos": [0, 0, 0]}\n')
    assert main(["track", str(bad), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert f"{bad}:2:" in err and "missing field" in err


def test_missing_file_is_a_clean_error(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "nope.jsonl"), str(tmp_path / "nope.jsonl")]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_flag_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["track", "x.jsonl", "--bogus"])
    assert exc.value.code == 2


def test_experiment_subcommand(tmp_path, capsys):
    args = ["experiment", "--out", str(tmp_path), "--lambda", "0", "--lambda", "1", "--order", "sequential",
            "--feat-gate", "0.25", "--threads", "1", "--no-trajectories", "--seed", "2"]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "lambda=1.00" in out and "HOTA=" in out
    assert (tmp_path / "results.csv").exists() and not (tmp_path / "trajectories").exists()


def test_unknown_operating_point(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path), "--operating-point", "extreme"]) == 1
    assert "unknown operating point" in capsys.readouterr().err


def test_console_module_runs():
    res = subprocess.run([sys.executable, "-m", "mot3d.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "calibrate-gate" in res.stdout
