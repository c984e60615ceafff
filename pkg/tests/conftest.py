import numpy as np
import pytest

from ionatom.constants import RB87_MASS_U, RB_POLARIZABILITY_AU, SR88_MASS_U
from ionatom.trap import SpeciesPair, mathieu_from_frequencies

RF = 2 * np.pi * 26.51e6
SECULAR = 2 * np.pi * np.array([0.82, 1.28, 0.58]) * 1e6


@pytest.fixture(scope="session")
def reference_trap():
    return mathieu_from_frequencies(SECULAR, RF)


@pytest.fixture(scope="session")
def sr_rb():
    return SpeciesPair.from_atomic_units(SR88_MASS_U, RB87_MASS_U, RB_POLARIZABILITY_AU)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
