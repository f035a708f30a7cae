import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.special import expit

from sotmle.core import Dataset, NuisancePair

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


def random_dataset(rng, n=200, d=1, continuous_y=False):
    w = rng.normal(size=(n, d))
    g = expit(0.8 + w @ np.linspace(0.5, -0.3, d))
    a = (rng.random(n) < g).astype(int)
    a[0] = 1
    q = expit(-0.3 + w @ np.linspace(-0.4, 0.6, d))
    y = rng.random(n) if continuous_y else (rng.random(n) < q).astype(float)
    return Dataset(w, a, np.where(a == 1, y, np.nan))


def linear_nuisance(d, qcoef=0.3, gcoef=0.4, trunc_g=0.01):
    def qbar(w):
        return expit(-0.2 + qcoef * np.asarray(w)[:, 0])

    def g(w):
        return expit(0.7 + gcoef * np.asarray(w).sum(axis=1))

    return NuisancePair(qbar, g, trunc_g)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_dataset(rng):
    return random_dataset(rng, n=150, d=1)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
