import numpy as np
import pytest

from augsearch import autodiff as ad

ad.tune_allocator()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
