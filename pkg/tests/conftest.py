import numpy as np
import pytest

from pvigcaps.tensor import set_precision


@pytest.fixture(autouse=True)
def _f64():
    set_precision("f64")
    yield
    set_precision("f64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
