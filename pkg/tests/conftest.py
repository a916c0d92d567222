import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("aanse", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("aanse")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
