import pytest

from poflab.data import ToyDatasetSpec, generate
from poflab.nn import MlpSpec


@pytest.fixture(scope="session")
def toy_data():
    return generate(ToyDatasetSpec(n_train=400, n_test=400, seed=3))


@pytest.fixture
def tiny_spec():
    return MlpSpec((2, 5, 4, 3))
