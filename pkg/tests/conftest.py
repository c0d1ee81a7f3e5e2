import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains networks or runs long Monte-Carlo sweeps")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
