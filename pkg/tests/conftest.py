import numpy as np
import pytest

from network import SimulatedNetwork


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def alpha():
    return 987654321


@pytest.fixture
def two_party_sessions(alpha):
    """Two simulated sessions with α split as (α - 5, 5) and no store"""
    net = SimulatedNetwork(2)
    sessions = net.sessions([alpha - 5, 5])
    yield sessions
    net.close()
