"""Per-frame tracking pipeline: associate, update, spawn, predict."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .association import (
    Assignment,
    GateConfig,
    apply_gates,
    combined_cost,
    feature_cost_matrix,
    position_cost_matrix,
    solve_assignment,
)
from .core import (
    DEFAULT_MEAS_SIGMA,
    DEFAULT_PROCESS_SIGMA,
    Detection,
    Track,
    ValidationError,
    WorldModel,
    check_psd,
    isotropic_cov,
    predict_checked,
    kalman_update,
)


@dataclass(frozen=True)
class TrackerConfig:
    gate: GateConfig = field(default_factory=GateConfig)
    meas_cov_default: np.ndarray = field(default_factory=lambda: isotropic_cov(DEFAULT_MEAS_SIGMA))
    process_noise: np.ndarray = field(default_factory=lambda: isotropic_cov(DEFAULT_PROCESS_SIGMA))
    feature_cap: Optional[int] = None
    # feature-free 3D-SORT baseline: detection features are never read
    use_features: bool = True
    # trajectory records report the associated detection ("detection") or the track posterior ("track")
    output_position: str = "detection"

    def __post_init__(self):
        object.__setattr__(self, "meas_cov_default", check_psd(self.meas_cov_default, "meas_cov_default"))
        object.__setattr__(self, "process_noise", check_psd(self.process_noise, "process_noise"))
        if self.output_position not in ("detection", "track"):
            raise ValidationError(f"output_position must be 'detection' or 'track', got {self.output_position!r}")
        if self.feature_cap is not None and self.feature_cap < 1:
            raise ValidationError(f"feature_cap must be a positive integer, got {self.feature_cap}")

    @property
    def features_active(self) -> bool:
        return self.use_features and self.gate.lam > 0.0

    @property
    def position_active(self) -> bool:
        return not self.features_active or self.gate.lam < 1.0


@dataclass(frozen=True)
class FrameLog:
    frame: int
    assignment: Assignment
    new_track_ids: tuple
    matched_ids: tuple = ()
    pair_costs: tuple = ()


@dataclass(frozen=True)
class TrajectoryRecord:
    frame: int
    id: int
    pos: tuple
    bbox: Optional[tuple] = None


def update_track(track: Track, det: Detection, config: TrackerConfig, frame: Optional[int] = None) -> Track:
    """Fold a matched detection into a track.

    ``frame`` is the logical time of the update and defaults to ``det.frame``.
    """
    frame = det.frame if frame is None else frame
    feats = np.vstack([track.features, det.feature[None, :]])
    if config.feature_cap is not None and len(feats) > config.feature_cap:
        feats = feats[-config.feature_cap:]
    return replace(
        track,
        position=kalman_update(track.position, det.position),
        features=feats,
        bbox=det.bbox if det.bbox is not None else track.bbox,
        last_update_frame=max(frame, track.last_update_frame),
        hits=track.hits + 1,
    )


def _cost_matrices(tracks, detections, config):
    m, n = len(tracks), len(detections)
    pos = np.zeros((m, n))
    feat = np.zeros((m, n))
    if m == 0 or n == 0:
        return pos, feat
    if config.position_active:
        means = np.stack([t.position.mean for t in tracks])
        covs = np.stack([t.position.cov for t in tracks])
        det_means = np.stack([d.position.mean for d in detections])
        pos = position_cost_matrix(means, covs, det_means, [t.id for t in tracks])
    if config.features_active:
        det_feats = np.stack([d.feature for d in detections])
        feat = feature_cost_matrix([t.features for t in tracks], det_feats)
    return pos, feat


def associate(tracks, detections, config: TrackerConfig):
    """Gated assignment of detections to (predicted) tracks.

    Each gate is enforced only while its cost carries weight: the feature
    gate is skipped at lambda = 0 and the position gate at lambda = 1.
    """
    pos, feat = _cost_matrices(tracks, detections, config)
    lam = config.gate.lam if config.use_features else 0.0
    gate = config.gate
    gate = replace(
        gate,
        pos_gate=gate.pos_gate if config.position_active else np.inf,
        feat_gate=gate.feat_gate if config.features_active else 2.0,
    )
    forbidden = apply_gates(pos, feat, gate)
    cost = combined_cost(pos, feat, lam)
    return solve_assignment(cost, forbidden), cost


def step(world: WorldModel, detections: Sequence[Detection], config: TrackerConfig,
         frame: Optional[int] = None):
    """Advance the world model by one frame.

    ``world.tracks`` must already hold the predicted beliefs for this frame;
    the returned world holds predictions for the next one.
    """
    detections = list(detections)
    if frame is None:
        frames = {d.frame for d in detections}
        if len(frames) > 1:
            raise ValidationError(f"detections span several frames: {sorted(frames)}")
        frame = frames.pop() if frames else world.frame + 1
    frame = int(frame)
    if frame <= world.frame:
        raise ValidationError(f"frame index {frame} does not follow {world.frame}")

    tracks = list(world.tracks)
    assignment, cost = associate(tracks, detections, config)

    matched_ids = []
    pair_costs = []
    for i, j in assignment.pairs:
        tracks[i] = update_track(tracks[i], detections[j], config, frame)
        matched_ids.append(tracks[i].id)
        pair_costs.append(float(cost[i, j]))

    next_id = world.next_id
    new_ids = []
    for j in assignment.unmatched_detections:
        tracks.append(Track.from_detection(next_id, detections[j], frame))
        new_ids.append(next_id)
        next_id += 1

    q = config.process_noise
    tracks = [replace(t, position=predict_checked(t.position, q)) for t in tracks]
    log = FrameLog(frame, assignment, tuple(new_ids), tuple(matched_ids), tuple(pair_costs))
    return world.with_tracks(tracks, frame, next_id), log


def run_sequence(frames, config: TrackerConfig):
    """Track an ordered sequence of frames.

    ``frames`` is a sequence of ``(frame_id, detections)``. Presentation
    order defines logical time, so a shuffled sequence is simply re-indexed;
    trajectory records keep the original ``frame_id``.

    Returns ``(world, records, logs)``.
    """
    world = WorldModel()
    records = []
    logs = []
    for t, (frame_id, detections) in enumerate(frames):
        detections = list(detections)
        before = len(world.tracks)
        world, log = step(world, detections, config, frame=t)
        logs.append(log)
        det_to_track = {}
        for (i, j) in log.assignment.pairs:
            det_to_track[j] = i
        for k, j in enumerate(log.assignment.unmatched_detections):
            det_to_track[j] = before + k
        for j in sorted(det_to_track):
            tr = world.tracks[det_to_track[j]]
            if config.output_position == "detection":
                pos = detections[j].position.mean
            else:
                # prediction leaves the mean untouched, so this is the posterior
                pos = tr.position.mean
            bbox = None if tr.bbox is None else tuple(float(b) for b in tr.bbox)
            records.append(TrajectoryRecord(int(frame_id), tr.id, tuple(float(x) for x in pos), bbox))
    return world, records, logs
