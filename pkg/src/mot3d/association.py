"""Cost matrices, gating and gated linear assignment between tracks and detections."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import linear_sum_assignment

from .core import COND_LIMIT, Gaussian3, ValidationError

CHI2_3DOF_95 = 7.82
SENTINEL_FACTOR = 1e6
QUANTILE = 0.95


@dataclass(frozen=True)
class GateConfig:
    pos_gate: float = CHI2_3DOF_95
    feat_gate: float = 2.0
    lam: float = 0.0

    def __post_init__(self):
        if not self.pos_gate > 0:
            raise ValidationError(f"pos_gate must be positive, got {self.pos_gate}")
        if not 0.0 <= self.feat_gate <= 2.0:
            raise ValidationError(f"feat_gate must lie in [0, 2], got {self.feat_gate}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class Assignment:
    pairs: tuple = ()
    unmatched_tracks: tuple = ()
    unmatched_detections: tuple = ()


def position_cost(track_belief: Gaussian3, det_mean, track_id=None) -> float:
    """Squared Mahalanobis distance of ``det_mean`` under the track covariance."""
    cov = track_belief.cov
    if np.linalg.cond(cov) > COND_LIMIT:
        name = "track" if track_id is None else f"track {track_id}"
        raise ValidationError(f"{name} covariance is near-singular")
    diff = np.asarray(det_mean, dtype=float) - track_belief.mean
    factor = cho_factor(cov, lower=True)
    return float(max(diff @ cho_solve(factor, diff), 0.0))


def position_cost_matrix(tracks_mean: np.ndarray, tracks_cov: np.ndarray, det_means: np.ndarray,
                         track_ids=None) -> np.ndarray:
    """Vectorized position_cost over M tracks and N detections."""
    m, n = len(tracks_mean), len(det_means)
    out = np.zeros((m, n))
    if m == 0 or n == 0:
        return out
    conds = np.linalg.cond(tracks_cov)
    bad = np.flatnonzero(conds > COND_LIMIT)
    if bad.size:
        i = int(bad[0])
        name = i if track_ids is None else track_ids[i]
        raise ValidationError(f"track {name} covariance is near-singular (condition {conds[i]:.3g})")
    try:
        chol = np.linalg.cholesky(tracks_cov)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(f"track covariance not positive definite: {exc}") from exc
    diff = det_means[None, :, :] - tracks_mean[:, None, :]
    # whiten: solve L y = diff for each track
    y = np.linalg.solve(chol[:, None, :, :], diff[..., None])[..., 0]
    return np.einsum("mnk,mnk->mn", y, y)


def feature_cost(track_features, det_feature) -> float:
    """Smallest cosine distance between the detection feature and the track's list."""
    feats = np.asarray(track_features, dtype=float)
    if feats.ndim == 1:
        feats = feats[None, :]
    if feats.shape[0] == 0:
        raise ValidationError("track feature list is empty")
    sims = feats @ np.asarray(det_feature, dtype=float)
    return float(np.clip(1.0 - sims.max(), 0.0, 2.0))


def feature_cost_matrix(track_features: Sequence[np.ndarray], det_features: np.ndarray) -> np.ndarray:
    m, n = len(track_features), len(det_features)
    out = np.zeros((m, n))
    if m == 0 or n == 0:
        return out
    lengths = np.array([len(f) for f in track_features])
    if np.any(lengths == 0):
        raise ValidationError("track feature list is empty")
    stacked = np.concatenate(track_features, axis=0)
    sims = stacked @ det_features.T
    starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    best = np.maximum.reduceat(sims, starts, axis=0)
    return np.clip(1.0 - best, 0.0, 2.0)


def combined_cost(pos, feat, lam: float) -> np.ndarray:
    pos = np.asarray(pos, dtype=float)
    feat = np.asarray(feat, dtype=float)
    if pos.shape != feat.shape:
        raise ValidationError(f"cost shapes differ: {pos.shape} vs {feat.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return pos.copy()
    if lam == 1.0:
        return feat.copy()
    return (1.0 - lam) * pos + lam * feat


def apply_gates(pos, feat, gate: GateConfig) -> np.ndarray:
    """Forbidden mask: a pair is dropped when either cost strictly exceeds its gate."""
    pos = np.asarray(pos, dtype=float)
    feat = np.asarray(feat, dtype=float)
    return (pos > gate.pos_gate) | (feat > gate.feat_gate)


def solve_assignment(cost, forbidden=None) -> Assignment:
    """Maximum-cardinality, then minimum-cost matching over allowed pairs.

    Forbidden pairs are priced with a sentinel large enough that using one
    is never worth it, then stripped from the solver output.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValidationError(f"cost matrix must be 2-D, got shape {cost.shape}")
    m, n = cost.shape
    forbidden = np.zeros((m, n), dtype=bool) if forbidden is None else np.asarray(forbidden, dtype=bool)
    if forbidden.shape != cost.shape:
        raise ValidationError("forbidden mask shape does not match cost matrix")
    allowed = ~forbidden
    if m == 0 or n == 0 or not allowed.any():
        return Assignment((), tuple(range(m)), tuple(range(n)))
    finite = cost[allowed]
    if not np.all(np.isfinite(finite)):
        raise ValidationError("non-forbidden costs must be finite")
    if np.any(finite < 0):
        raise ValidationError("costs must be non-negative")

    big = SENTINEL_FACTOR * max(float(finite.max()), 1.0) * max(m, n)
    size = max(m, n)
    padded = np.full((size, size), big)
    padded[:m, :n] = np.where(allowed, cost, big)
    rows, cols = linear_sum_assignment(padded)

    pairs = []
    for i, j in zip(rows, cols):
        if i < m and j < n and allowed[i, j]:
            pairs.append((int(i), int(j)))
    pairs.sort()
    matched_t = {i for i, _ in pairs}
    matched_d = {j for _, j in pairs}
    return Assignment(
        tuple(pairs),
        tuple(i for i in range(m) if i not in matched_t),
        tuple(j for j in range(n) if j not in matched_d),
    )


def nearest_rank_quantile(values, q: float = QUANTILE) -> float:
    vals = np.sort(np.asarray(values, dtype=float))
    if vals.size == 0:
        raise ValidationError("quantile of an empty sample")
    rank = max(1, math.ceil(q * vals.size - 1e-12))
    return float(vals[rank - 1])


def calibrate_feature_gate(labeled_features, q: float = QUANTILE) -> float:
    """Feature gate from a labelled validation set.

    For every occurrence, take the minimum cosine distance to the other
    occurrences of the same id; the gate is the nearest-rank ``q`` quantile
    of those minima.
    """
    by_id: dict = {}
    for obj_id, feat in labeled_features:
        by_id.setdefault(obj_id, []).append(np.asarray(feat, dtype=float))
    minima = []
    for feats in by_id.values():
        if len(feats) < 2:
            continue
        f = np.stack(feats)
        dist = 1.0 - f @ f.T
        np.fill_diagonal(dist, np.inf)
        minima.append(np.clip(dist.min(axis=1), 0.0, 2.0))
    if not minima:
        raise ValidationError("feature gate calibration needs an id with at least two occurrences")
    return nearest_rank_quantile(np.concatenate(minima), q)
