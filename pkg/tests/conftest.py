import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# Deterministic suite: hypothesis replays the same cases on every run.
settings.register_profile(
    "ci",
    derandomize=True,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
