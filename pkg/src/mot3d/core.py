"""Domain types and the static-model Kalman filter.

Every object here is an immutable value: operations return new instances
instead of mutating their inputs, so beliefs can be shared freely between
tracker steps and threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

SYM_TOL = 1e-9
UNIT_TOL = 1e-6
COND_LIMIT = 1e12

DEFAULT_FEAT_DIM = 64
DEFAULT_MEAS_SIGMA = 0.01
DEFAULT_PROCESS_SIGMA = 0.002


class ValidationError(ValueError):
    """Raised when a value violates a domain invariant."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def isotropic_cov(sigma: float) -> np.ndarray:
    return np.eye(3) * float(sigma) ** 2


def normalize_feature(values) -> np.ndarray:
    """Return ``values`` scaled to unit L2 norm.

    Normalizing an already-unit vector is a no-op up to rounding, so ingest
    paths can call this unconditionally.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValidationError("feature vector is empty")
    if not np.all(np.isfinite(v)):
        raise ValidationError("feature vector has non-finite entries")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValidationError("feature vector has zero norm")
    if abs(norm - 1.0) <= 1e-15:
        return v.copy()
    return v / norm


def check_unit(v: np.ndarray) -> None:
    if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
        raise ValidationError(f"feature vector norm {np.linalg.norm(v):.9g} is not 1")


def check_psd(m: np.ndarray, what: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise ValidationError(f"{what} must be 3x3, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{what} has non-finite entries")
    if np.max(np.abs(m - m.T)) > SYM_TOL:
        raise ValidationError(f"{what} is not symmetric")
    if np.linalg.eigvalsh(m).min() < -SYM_TOL:
        raise ValidationError(f"{what} is not positive semi-definite")
    return m


@dataclass(frozen=True, eq=False)
class Gaussian3:
    """3D position belief: mean in meters, covariance in m^2."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float)
        if mean.shape != (3,):
            raise ValidationError(f"mean must be a 3-vector, got shape {mean.shape}")
        if not np.all(np.isfinite(mean)):
            raise ValidationError("mean has non-finite entries")
        if cov.shape != (3, 3):
            raise ValidationError(f"cov must be 3x3, got shape {cov.shape}")
        if not np.all(np.isfinite(cov)):
            raise ValidationError("cov has non-finite entries")
        if np.max(np.abs(cov - cov.T)) > SYM_TOL:
            raise ValidationError("cov is not symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0.0:
            raise ValidationError("cov is not positive definite")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov", _frozen(cov))

    @classmethod
    def _trusted(cls, mean: np.ndarray, cov: np.ndarray) -> "Gaussian3":
        """Build without re-validating; callers guarantee the invariants."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "mean", _frozen(np.array(mean, dtype=float)))
        object.__setattr__(obj, "cov", _frozen(np.array(cov, dtype=float)))
        return obj

    def __eq__(self, other):
        if not isinstance(other, Gaussian3):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.cov, other.cov)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Detection:
    position: Gaussian3
    feature: np.ndarray
    frame: int
    bbox: Optional[np.ndarray] = None

    def __post_init__(self):
        if int(self.frame) < 0:
            raise ValidationError(f"frame index must be non-negative, got {self.frame}")
        object.__setattr__(self, "frame", int(self.frame))
        object.__setattr__(self, "feature", _frozen(normalize_feature(self.feature)))
        if self.bbox is not None:
            box = np.array(self.bbox, dtype=float).reshape(-1)
            if box.shape != (4,) or box[2] <= 0 or box[3] <= 0:
                raise ValidationError(f"bbox must be (u, v, w, h) with w, h > 0, got {self.bbox!r}")
            object.__setattr__(self, "bbox", _frozen(box))


@dataclass(frozen=True, eq=False)
class Track:
    """One world-model object.

    ``features`` is a (k, d) read-only array holding the appearance history,
    oldest first.
    """

    id: int
    position: Gaussian3
    features: np.ndarray
    bbox: Optional[np.ndarray]
    birth_frame: int
    last_update_frame: int
    hits: int = 1

    def __post_init__(self):
        if self.id < 0:
            raise ValidationError(f"track id must be non-negative, got {self.id}")
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ValidationError(f"track {self.id} has an empty feature list")
        if self.last_update_frame < self.birth_frame:
            raise ValidationError(f"track {self.id}: last_update_frame < birth_frame")
        object.__setattr__(self, "features", _frozen(feats))

    @classmethod
    def from_detection(cls, track_id: int, det: Detection, frame: int) -> "Track":
        return cls(
            id=track_id,
            position=det.position,
            features=det.feature[None, :].copy(),
            bbox=det.bbox,
            birth_frame=frame,
            last_update_frame=frame,
            hits=1,
        )


@dataclass(frozen=True)
class WorldModel:
    tracks: tuple = ()
    frame: int = -1
    next_id: int = 0

    def __len__(self):
        return len(self.tracks)

    def with_tracks(self, tracks, frame: int, next_id: int) -> "WorldModel":
        return replace(self, tracks=tuple(tracks), frame=frame, next_id=next_id)


def kalman_predict(state: Gaussian3, process_noise) -> Gaussian3:
    """Static-model prediction: mean unchanged, covariance grows by Q."""
    q = check_psd(process_noise, "process_noise")
    return predict_checked(state, q)


def predict_checked(state: Gaussian3, q: np.ndarray) -> Gaussian3:
    """kalman_predict for a process noise already known to be symmetric PSD."""
    # PD + PSD stays PD; keep the sum exactly symmetric
    cov = state.cov + q
    return Gaussian3._trusted(state.mean, 0.5 * (cov + cov.T))


def kalman_update(prior: Gaussian3, measurement: Gaussian3) -> Gaussian3:
    """Kalman correction with an identity observation model on (x, y, z)."""
    s = prior.cov + measurement.cov
    cond = np.linalg.cond(s)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise ValidationError(f"innovation covariance is singular (condition number {cond:.3g})")
    # K = P S^-1, computed as a solve on the transposed system
    gain = np.linalg.solve(s, prior.cov).T
    mean = prior.mean + gain @ (measurement.mean - prior.mean)
    cov = (np.eye(3) - gain) @ prior.cov
    cov = 0.5 * (cov + cov.T)
    return Gaussian3(mean, cov)
