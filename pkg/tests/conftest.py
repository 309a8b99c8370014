import numpy as np
import pytest

from topomoe import tensor as T


@pytest.fixture(autouse=True)
def _reset_dtype():
    yield
    T.set_default_dtype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
