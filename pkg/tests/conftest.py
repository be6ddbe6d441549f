import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from bayesfuse.gaussian import GaussianBelief

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_spd(rng, d, cond=50.0):
    """SPD matrix with eigenvalues spread over roughly ``cond``."""
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    eig = np.exp(rng.uniform(0.0, np.log(cond), d))
    a = (q * eig) @ q.T
    return 0.5 * (a + a.T)


def random_belief(rng, d, diagonal=False, scale=1.0):
    mean = rng.normal(size=d) * scale
    if diagonal:
        return GaussianBelief(mean, rng.uniform(0.2, 5.0, d))
    return GaussianBelief(mean, random_spd(rng, d))


seeds = st.integers(0, 2**32 - 1)
dims = st.sampled_from([1, 2, 6])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
