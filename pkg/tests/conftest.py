import numpy as np
import pytest

from mmnmt.autodiff import Parameter, make_rng


@pytest.fixture
def rng():
    return make_rng(20240917)


def param(name, data):
    """float64 Parameter from array-like data."""
    return Parameter(name, np.asarray(data, dtype=np.float64), np.float64)
