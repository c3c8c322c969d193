import numpy as np
import pytest

from pemb_testlib import random_set


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_pair(rng):
    return random_set(rng, 6, 4, "v"), random_set(rng, 5, 4, "t")
