import numpy as np
import pytest

from mot3d.core import (
    Detection,
    Gaussian3,
    Track,
    ValidationError,
    WorldModel,
    isotropic_cov,
    kalman_predict,
    kalman_update,
    normalize_feature,
)
from conftest import random_pd


def info_form_update(prior, meas):
    """Independent oracle: fuse in information (inverse-covariance) form."""
    lp = np.linalg.inv(prior.cov)
    lm = np.linalg.inv(meas.cov)
    cov = np.linalg.inv(lp + lm)
    mean = cov @ (lp @ prior.mean + lm @ meas.mean)
    return mean, cov


def test_gaussian_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        Gaussian3(np.zeros(2), np.eye(3))
    with pytest.raises(ValidationError):
        Gaussian3(np.zeros(3), np.array([[1, 0.1, 0], [0, 1, 0], [0, 0, 1.0]]))
    with pytest.raises(ValidationError):
        Gaussian3(np.zeros(3), np.diag([1.0, 0.0, 1.0]))
    with pytest.raises(ValidationError):
        Gaussian3(np.array([0, np.nan, 0]), np.eye(3))


def test_gaussian_is_immutable():
    g = Gaussian3(np.zeros(3), np.eye(3))
    with pytest.raises(ValueError):
        g.mean[0] = 1.0


def test_predict_zero_noise_is_identity():
    g = Gaussian3(np.zeros(3), np.eye(3))
    assert kalman_predict(g, np.zeros((3, 3))) == g


def test_predict_adds_process_noise():
    g = Gaussian3(np.array([1.0, 2.0, 3.0]), np.eye(3))
    out = kalman_predict(g, 0.01 * np.eye(3))
    np.testing.assert_array_equal(out.mean, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(out.cov, 1.01 * np.eye(3), atol=1e-15)


def test_predict_random_difference_equals_q(rng):
    for _ in range(50):
        g = Gaussian3(rng.normal(size=3), random_pd(rng))
        q = random_pd(rng, scale=0.1)
        out = kalman_predict(g, q)
        assert np.max(np.abs(out.cov - g.cov - q)) < 1e-12


def test_predict_rejects_non_psd_noise():
    g = Gaussian3(np.zeros(3), np.eye(3))
    with pytest.raises(ValidationError):
        kalman_predict(g, -0.1 * np.eye(3))
    with pytest.raises(ValidationError):
        kalman_predict(g, np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0.0]]))


def test_update_symmetric_fusion():
    g = Gaussian3(np.ones(3), np.eye(3))
    out = kalman_update(g, g)
    np.testing.assert_allclose(out.mean, np.ones(3))
    np.testing.assert_allclose(out.cov, 0.5 * np.eye(3))


def test_update_uninformative_measurement():
    prior = Gaussian3(np.array([0.1, 0.2, 0.3]), np.diag([0.01, 0.02, 0.03]))
    meas = Gaussian3(np.array([5.0, -5.0, 5.0]), 1e9 * np.eye(3))
    out = kalman_update(prior, meas)
    np.testing.assert_allclose(out.cov, prior.cov, rtol=1e-6)
    assert np.max(np.abs(out.mean - prior.mean)) < 1e-6 * 10


def test_update_matches_information_form(rng):
    for _ in range(100):
        prior = Gaussian3(rng.normal(size=3), random_pd(rng))
        meas = Gaussian3(rng.normal(size=3), random_pd(rng))
        out = kalman_update(prior, meas)
        mean, cov = info_form_update(prior, meas)
        np.testing.assert_allclose(out.mean, mean, atol=1e-9)
        np.testing.assert_allclose(out.cov, cov, atol=1e-9)
        assert np.trace(out.cov) < np.trace(prior.cov)


def test_update_posterior_below_prior_in_psd_order(rng):
    for _ in range(100):
        prior = Gaussian3(rng.normal(size=3), random_pd(rng))
        out = kalman_update(prior, Gaussian3(rng.normal(size=3), random_pd(rng)))
        assert np.linalg.eigvalsh(prior.cov - out.cov).min() > -1e-12


def test_update_singular_innovation_reports_condition_number():
    prior = Gaussian3(np.zeros(3), np.diag([1e-15, 1.0, 1.0]))
    meas = Gaussian3(np.zeros(3), np.diag([1e-15, 1.0, 1.0]))
    with pytest.raises(ValidationError, match="condition number"):
        kalman_update(prior, meas)


def test_predict_update_shrinks_every_eigenvalue(rng):
    for _ in range(20):
        prior = Gaussian3(rng.normal(size=3), random_pd(rng))
        pred = kalman_predict(prior, np.zeros((3, 3)))
        out = kalman_update(pred, Gaussian3(prior.mean, random_pd(rng)))
        np.testing.assert_allclose(out.mean, prior.mean, atol=1e-12)
        # the posterior is strictly below the prior in PSD order, so each sorted eigenvalue shrinks
        assert np.all(np.linalg.eigvalsh(out.cov) < np.linalg.eigvalsh(prior.cov))


def test_long_alternating_cycles_stay_valid(rng):
    g = Gaussian3(np.zeros(3), random_pd(rng))
    for _ in range(10_000):
        g = kalman_predict(g, random_pd(rng, scale=0.01))
        g = kalman_update(g, Gaussian3(rng.normal(size=3), random_pd(rng)))
    assert np.max(np.abs(g.cov - g.cov.T)) <= 1e-9
    assert np.linalg.eigvalsh(g.cov).min() > 0


def test_normalize_feature():
    v = normalize_feature([3.0, 4.0])
    np.testing.assert_allclose(v, [0.6, 0.8])
    np.testing.assert_allclose(normalize_feature(v), v, atol=1e-12)
    for bad in ([], [0.0, 0.0], [1.0, np.inf]):
        with pytest.raises(ValidationError):
            normalize_feature(bad)


def test_detection_normalizes_and_checks_bbox():
    det = Detection(Gaussian3(np.zeros(3), np.eye(3)), [2.0, 0.0], 0, bbox=[1, 2, 3, 4])
    np.testing.assert_array_equal(det.feature, [1.0, 0.0])
    with pytest.raises(ValidationError):
        Detection(Gaussian3(np.zeros(3), np.eye(3)), [1.0, 0.0], 0, bbox=[1, 2, 0, 4])
    with pytest.raises(ValidationError):
        Detection(Gaussian3(np.zeros(3), np.eye(3)), [1.0, 0.0], -1)


def test_track_invariants():
    det = Detection(Gaussian3(np.zeros(3), isotropic_cov(0.01)), [1.0, 0.0], 4)
    tr = Track.from_detection(7, det, 4)
    assert tr.features.shape == (1, 2) and tr.birth_frame == tr.last_update_frame == 4
    with pytest.raises(ValidationError):
        Track(0, det.position, np.zeros((0, 2)), None, 0, 0)
    with pytest.raises(ValidationError):
        Track(0, det.position, np.ones((1, 2)), None, 5, 4)
    assert len(WorldModel()) == 0
