import numpy as np
import pytest
from hypothesis import settings

# fixed example generation keeps suite runs reproducible
settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE_RESULTS = {}


def random_pd(rng, scale=1.0, cond_max=1e3):
    """Random symmetric positive-definite 3x3 matrix with bounded conditioning."""
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    eig = scale * np.exp(rng.uniform(0.0, np.log(cond_max), size=3)) / cond_max
    m = (q * eig) @ q.T
    return 0.5 * (m + m.T)


def random_unit(rng, d=8):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
