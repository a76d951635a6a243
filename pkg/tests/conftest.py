import numpy as np
import pytest

from ballcatch.robot_model import default_description


@pytest.fixture(scope="session")
def desc():
    return default_description()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_q(rng, desc, n):
    """Random joint vectors inside the position box (base limited to +-1 m)."""
    lim = np.minimum(desc.q_max, np.r_[np.full(6, np.pi), 1.0, 1.0])
    return rng.uniform(-lim, lim, (n, 8))
