import numpy as np
import pytest

from paramid.data import generate_dataset
from paramid.envs import make_spec


@pytest.fixture(scope="session")
def tiny_dual_dataset():
    return generate_dataset(make_spec("dual-particle", horizon=12), count=120, seed=77)


@pytest.fixture(scope="session")
def tiny_springs_dataset():
    return generate_dataset(make_spec("springs", horizon=10), count=80, seed=78)
