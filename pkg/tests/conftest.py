import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numpy", "numba"])
def kernel_backend(request):
    from echosynth.engine import kernels

    if request.param == "numba" and not kernels.HAVE_NUMBA:
        pytest.skip("numba not installed")
    prev = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)
