import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from numba.core.errors import NumbaPerformanceWarning

settings.register_profile("fenrir", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fenrir")
warnings.simplefilter("ignore", NumbaPerformanceWarning)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running replication experiment")
    config.addinivalue_line("markers", "acceptance: acceptance criteria with printed verdicts")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
