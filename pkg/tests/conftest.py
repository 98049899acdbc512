import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_window(rng, T, n, scale=0.05):
    from dre2e.risk import ErrorWindow
    return ErrorWindow(rng.normal(0.0, scale, size=(T, n)))


def random_simplex(rng, n):
    return rng.dirichlet(np.ones(n))
