import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from snsmix.noise import build_covariance

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def Q2():
    return build_covariance(1, 1.4, 2)


@pytest.fixture(scope="session")
def Q3():
    return build_covariance(1, 1.4, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield
