import json

import numpy as np
import pytest

from mot3d import io as recio
from mot3d.core import Detection, Gaussian3, isotropic_cov
from mot3d.io import FormatError, DetectionFrame
from mot3d.tracker import TrajectoryRecord
from conftest import random_pd, random_unit


def test_trajectory_round_trip_is_exact(tmp_path, rng):
    recs = []
    for k in range(10_000):
        bbox = tuple(rng.uniform(1, 100, 4).tolist()) if k % 3 == 0 else None
        recs.append(TrajectoryRecord(k // 7, k % 7, tuple(rng.normal(size=3).tolist()), bbox))
    path = tmp_path / "t.jsonl"
    recio.write_trajectories(path, recs)
    assert recio.read_trajectories(path) == recs


def test_detection_round_trip_is_exact(tmp_path, rng):
    frames = []
    for f in range(20):
        dets = [Detection(Gaussian3(rng.normal(size=3), random_pd(rng, scale=0.01)), random_unit(rng, 8), f,
                          rng.uniform(1, 9, 4) if f % 2 else None) for _ in range(3)]
        frames.append(DetectionFrame(f, dets, [0, None, 2]))
    path = tmp_path / "d.jsonl"
    recio.write_detections(path, frames)
    back = recio.read_detections(path)
    assert [fr.frame for fr in back] == list(range(20))
    for a, b in zip(frames, back):
        assert a.gt_ids == b.gt_ids
        for da, db in zip(a.detections, b.detections):
            assert da.position == db.position
            np.testing.assert_array_equal(da.feature, db.feature)
            assert (da.bbox is None) == (db.bbox is None)


def test_missing_covariance_uses_default():
    line = json.dumps({"frame": 0, "pos": [0, 0, 0], "feat": [1, 0]})
    (fr,) = recio.read_detections([line])
    np.testing.assert_array_equal(fr.detections[0].position.cov, isotropic_cov(0.01))
    (fr,) = recio.read_detections([line], meas_cov_default=np.eye(3))
    np.testing.assert_array_equal(fr.detections[0].position.cov, np.eye(3))


def test_empty_input_has_no_frames(tmp_path):
    path = tmp_path / "e.jsonl"
    path.write_text("")
    assert recio.read_detections(path) == []
    assert recio.read_trajectories(path) == []


def test_unknown_fields_strict_and_lenient():
    line = json.dumps({"frame": 0, "id": 1, "pos": [0, 0, 0], "colour": "red"})
    with pytest.raises(FormatError, match="unknown field"):
        recio.read_trajectories([line])
    assert len(recio.read_trajectories([line], strict=False)) == 1


@pytest.mark.parametrize("bad, message", [
    ('{"frame": 0, "pos": [0, 0]}', "missing field"),
    ('{"frame": 0, "id": 1, "pos": [0, 0]}', "'pos' must be"),
    ('{"frame": -1, "id": 1, "pos": [0, 0, 0]}', "'frame' must be >= 0"),
    ('{"frame": 0, "id": 1.5, "pos": [0, 0, 0]}', "'id' must be an integer"),
    ('{"frame": 0, "id": 1, "pos": [0, "a", 0]}', "must contain numbers"),
    ('{"frame": 0, "id": 1, "pos": [0, NaN, 0]}', "non-finite"),
    ('[1, 2]', "JSON object"),
    ('{"frame": 0,', "invalid JSON"),
])
def test_malformed_trajectories_report_line(tmp_path, bad, message):
    path = tmp_path / "bad.jsonl"
    good = json.dumps({"frame": 0, "id": 0, "pos": [0, 0, 0]})
    path.write_text(good + "\n\n" + bad + "\n")
    with pytest.raises(FormatError, match=message) as exc:
        recio.read_trajectories(path)
    assert exc.value.line == 3
    assert str(exc.value).startswith(f"{path}:3:")


def test_duplicate_trajectory_record():
    line = json.dumps({"frame": 0, "id": 1, "pos": [0, 0, 0]})
    with pytest.raises(FormatError, match="duplicate"):
        recio.read_trajectories([line, line])


def test_detection_format_errors():
    a = json.dumps({"frame": 0, "pos": [0, 0, 0], "feat": [1, 0]})
    b = json.dumps({"frame": 1, "pos": [0, 0, 0], "feat": [1, 0, 0]})
    with pytest.raises(FormatError, match="feature length"):
        recio.read_detections([a, b])
    zero = json.dumps({"frame": 0, "pos": [0, 0, 0], "feat": [0, 0]})
    with pytest.raises(FormatError) as exc:
        recio.read_detections([zero])
    assert exc.value.line == 1
    bad_cov = json.dumps({"frame": 0, "pos": [0, 0, 0], "feat": [1, 0], "pos_cov": [1, 0, 0, 0, -1, 0, 0, 0, 1]})
    with pytest.raises(FormatError):
        recio.read_detections([bad_cov])


def test_config_schema_version(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"schema_version": 2}))
    with pytest.raises(FormatError, match="schema_version"):
        recio.load_json_config(path, 1)
    path.write_text("{")
    with pytest.raises(FormatError, match="invalid JSON"):
        recio.load_json_config(path, 1)
    path.write_text(json.dumps({"schema_version": 1, "x": 2}))
    assert recio.load_json_config(path, 1)["x"] == 2


def test_finite_or_none():
    assert recio.finite_or_none(float("nan")) is None
    assert recio.finite_or_none(None) is None
    assert recio.finite_or_none(1.5) == 1.5
