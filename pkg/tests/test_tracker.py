from dataclasses import replace

import numpy as np
import pytest

from mot3d.association import GateConfig
from mot3d.core import Detection, Gaussian3, Track, ValidationError, WorldModel, isotropic_cov
from mot3d.metrics import TrajectorySet, evaluate
from mot3d.tracker import TrackerConfig, run_sequence, step, update_track
from conftest import random_pd, random_unit

COV = isotropic_cov(0.01)


def det(pos, feat, frame=0, bbox=None, cov=COV):
    return Detection(Gaussian3(np.asarray(pos, float), cov), feat, frame, bbox)


def static_scene(rng, k=5, frames=8, d=16, noise=0.0, feat_noise=0.0):
    """K well-separated static objects observed in every frame."""
    centers = rng.uniform(-1, 1, size=(k, 3)) + 3.0 * np.arange(k)[:, None]
    feats = [random_unit(rng, d) for _ in range(k)]
    seq = []
    for f in range(frames):
        dets, ids = [], []
        for i in rng.permutation(k):
            fv = feats[i] + feat_noise * rng.normal(size=d)
            dets.append(det(centers[i] + noise * rng.normal(size=3), fv, f))
            ids.append(int(i))
        seq.append((f, dets, ids, centers))
    return seq


def test_cold_start_assigns_ids_in_input_order(rng):
    dets = [det(rng.normal(size=3) * 5, random_unit(rng), 0) for _ in range(3)]
    world, log = step(WorldModel(), dets, TrackerConfig())
    assert [t.id for t in world.tracks] == [0, 1, 2]
    assert log.new_track_ids == (0, 1, 2)
    for t, d in zip(world.tracks, dets):
        np.testing.assert_array_equal(t.features[0], d.feature)
        np.testing.assert_array_equal(t.position.mean, d.position.mean)


def test_perfect_reobservation_matches():
    f = np.array([1.0, 0.0])
    cfg = TrackerConfig(gate=GateConfig(feat_gate=0.5, lam=0.5))
    world, _ = step(WorldModel(), [det(np.zeros(3), f, 0)], cfg)
    world, log = step(world, [det(np.zeros(3), f, 1)], cfg)
    assert len(world) == 1 and world.tracks[0].hits == 2
    assert log.new_track_ids == () and log.matched_ids == (0,)


def test_fully_gated_detection_spawns_track():
    cfg = TrackerConfig(gate=GateConfig(feat_gate=0.5, lam=0.5))
    world, _ = step(WorldModel(), [det(np.zeros(3), [1.0, 0.0], 0)], cfg)
    world, log = step(world, [det([10.0, 0, 0], [0.0, 1.0], 1)], cfg)
    assert len(world) == 2 and log.new_track_ids == (1,)


def test_frame_must_increase():
    world, _ = step(WorldModel(), [det(np.zeros(3), [1.0, 0.0], 3)], TrackerConfig())
    with pytest.raises(ValidationError):
        step(world, [det(np.zeros(3), [1.0, 0.0], 3)], TrackerConfig())
    with pytest.raises(ValidationError):
        step(WorldModel(), [det(np.zeros(3), [1.0, 0.0], 0), det(np.zeros(3), [1.0, 0.0], 1)], TrackerConfig())


def test_empty_step_only_predicts():
    cfg = TrackerConfig()
    world, _ = step(WorldModel(), [det(np.zeros(3), [1.0, 0.0], 0)], cfg)
    before = world.tracks[0].position.cov
    world, log = step(world, [], cfg, frame=1)
    assert len(world) == 1 and log.assignment.pairs == ()
    np.testing.assert_allclose(world.tracks[0].position.cov, before + cfg.process_noise)


def test_update_track_appends_and_keeps_missing_bbox():
    d0 = det(np.zeros(3), [1.0, 0.0], 0, bbox=[1, 1, 2, 2])
    tr = Track.from_detection(0, d0, 0)
    tr2 = update_track(tr, det(np.zeros(3), [0.0, 1.0], 1), TrackerConfig())
    assert tr2.features.shape == (2, 2) and tr2.hits == 2 and tr2.last_update_frame == 1
    np.testing.assert_array_equal(tr2.bbox, [1, 1, 2, 2])
    tr3 = update_track(tr2, det(np.zeros(3), [0.0, 1.0], 2, bbox=[5, 5, 1, 1]), TrackerConfig())
    np.testing.assert_array_equal(tr3.bbox, [5, 5, 1, 1])
    assert tr3.id == 0


def test_update_track_feature_cap():
    cfg = TrackerConfig(feature_cap=2)
    tr = Track.from_detection(0, det(np.zeros(3), [1.0, 0.0, 0.0], 0), 0)
    for k, f in enumerate(([0.0, 1.0, 0.0], [0.0, 0.0, 1.0]), start=1):
        tr = update_track(tr, det(np.zeros(3), f, k), cfg)
    np.testing.assert_array_equal(tr.features, [[0, 1, 0], [0, 0, 1]])
    with pytest.raises(ValidationError):
        TrackerConfig(feature_cap=0)


def test_update_track_shrinks_trace(rng):
    for _ in range(100):
        tr = Track(0, Gaussian3(rng.normal(size=3), random_pd(rng)), random_unit(rng)[None], None, 0, 0)
        d = Detection(Gaussian3(rng.normal(size=3), random_pd(rng)), random_unit(rng), 1)
        assert np.trace(update_track(tr, d, TrackerConfig()).position.cov) < np.trace(tr.position.cov)


def test_single_frame_sequence(rng):
    dets = [det(rng.normal(size=3) * 5, random_unit(rng)) for _ in range(4)]
    world, recs, logs = run_sequence([(0, dets)], TrackerConfig())
    assert len(recs) == 4 and len({r.id for r in recs}) == 4 and len(logs) == 1


def test_noiseless_static_objects_tracked_perfectly(rng):
    seq = static_scene(rng, k=6, frames=10)
    world, recs, _ = run_sequence([(f, d) for f, d, _, _ in seq], TrackerConfig())
    assert len(world) == 6
    gt = TrajectorySet([{"frame": f, "id": i, "pos": c[i]} for f, _, ids, c in seq for i in ids])
    report = evaluate(gt, TrajectorySet(recs))
    assert report.idsw == 0 and report.hota == pytest.approx(1.0)


def test_features_only_is_order_robust(rng):
    seq = static_scene(rng, k=6, frames=10, noise=0.05)
    cfg = TrackerConfig(gate=GateConfig(feat_gate=0.1, lam=1.0))
    frames = [(f, d) for f, d, _, _ in seq]
    w1, _, _ = run_sequence(frames, cfg)
    w2, _, _ = run_sequence([frames[i] for i in rng.permutation(len(frames))], cfg)
    assert len(w1) == len(w2) == 6


def test_sequence_invariants(rng):
    seq = static_scene(rng, k=5, frames=12, noise=0.02, feat_noise=0.3)
    cfg = TrackerConfig(gate=GateConfig(feat_gate=0.4, lam=0.5))
    world = WorldModel()
    counts = []
    n_dets = 0
    for t, (f, dets, _, _) in enumerate(seq):
        world, log = step(world, dets, cfg, frame=t)
        counts.append(len(world))
        n_dets += len(dets)
        touched = [j for _, j in log.assignment.pairs] + list(log.assignment.unmatched_detections)
        assert sorted(touched) == list(range(len(dets)))
        assert len(log.new_track_ids) == len(log.assignment.unmatched_detections)
    assert counts == sorted(counts)
    assert sum(len(t.features) for t in world.tracks) == n_dets
    ids = [t.id for t in world.tracks]
    assert len(set(ids)) == len(ids)


def test_lambda_zero_is_feature_free(rng):
    seq = static_scene(rng, k=5, frames=12, noise=0.03, feat_noise=0.5)
    frames = [(f, d) for f, d, _, _ in seq]
    cfg = TrackerConfig(gate=GateConfig(feat_gate=0.01, lam=0.0))
    _, a, _ = run_sequence(frames, cfg)
    _, b, _ = run_sequence(frames, replace(cfg, use_features=False))
    assert a == b


def test_run_sequence_is_deterministic(rng):
    seq = static_scene(rng, k=5, frames=10, noise=0.03, feat_noise=0.3)
    frames = [(f, d) for f, d, _, _ in seq]
    cfg = TrackerConfig(gate=GateConfig(feat_gate=0.5, lam=0.5))
    assert run_sequence(frames, cfg)[1] == run_sequence(frames, cfg)[1]


def test_output_position_modes(rng):
    seq = static_scene(rng, k=2, frames=3, noise=0.002)
    frames = [(f, d) for f, d, _, _ in seq]
    world, recs, _ = run_sequence(frames, TrackerConfig())
    assert len(world) == 2
    first = frames[0][1][0]
    assert recs[0].pos == tuple(first.position.mean)
    _, recs_t, _ = run_sequence(frames, TrackerConfig(output_position="track"))
    assert recs_t[-1].pos != recs[-1].pos
    with pytest.raises(ValidationError):
        TrackerConfig(output_position="mean")
