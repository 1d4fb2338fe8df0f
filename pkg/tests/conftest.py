import numpy as np
import pytest

from bubbleonet.physics import FluidParams, dimensionless_groups, make_scales


@pytest.fixture
def fluid():
    return FluidParams()


@pytest.fixture
def scales(fluid):
    return make_scales(50e-6, 50e-6, fluid)


@pytest.fixture
def groups(fluid, scales):
    return dimensionless_groups(fluid, scales)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
