import numpy as np
import pytest

from gvd.config import ModelConfig
from gvd.grid_ops import WeightPair


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cfg():
    return ModelConfig()


def random_weights(shape, cfg, rng):
    lo, hi = cfg.omega_min, cfg.omega_max
    return WeightPair(rng.uniform(lo, hi, (2,) + tuple(shape)), rng.uniform(lo, hi, (2,) + tuple(shape)), lo, hi)
