import numpy as np
import pytest

from kml.tensor import set_default_dtype


@pytest.fixture(autouse=True)
def float64_default():
    """Correctness tests run in 64-bit; tests opt into f32 explicitly."""
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
