import numpy as np
import pytest

from mocha import fixtures


@pytest.fixture
def conflict5():
    return fixtures.conflict5()


@pytest.fixture
def conflict3():
    return fixtures.conflict3()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
