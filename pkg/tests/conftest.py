import numpy as np
import pytest

try:
    import threadpoolctl

    threadpoolctl.threadpool_limits(1)
except Exception:
    pass


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
