import numpy as np
import pytest

from optproxy.grid import resolve_network


@pytest.fixture(scope="session")
def case3():
    return resolve_network("case3")


@pytest.fixture(scope="session")
def case30():
    return resolve_network("case30")


@pytest.fixture(scope="session")
def scopf3():
    return resolve_network("scopf3")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
