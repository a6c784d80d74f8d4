import numpy as np
import pytest

from mvlidar import _kernels as kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run the test once per available kernel backend."""
    with kernels.backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
