import numpy as np
import pytest

from sdsm import model as mdl


@pytest.fixture(scope="session")
def ref_model():
    return mdl.reference_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
