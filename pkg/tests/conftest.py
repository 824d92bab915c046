import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from diffgan import tensor as T

settings.register_profile("default", deadline=None, print_blob=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return T.Rng(1234)


@pytest.fixture
def nprng():
    return np.random.default_rng(0)
