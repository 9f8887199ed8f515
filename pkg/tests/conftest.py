import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from wavesplit.acoustics import tdesign_64

# bitwise determinism checks assume one BLAS thread
threadpool_limits(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mics():
    return tdesign_64()
