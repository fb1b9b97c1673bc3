import numpy as np
import pytest

from flatctl.flatsys import builtin_academic, builtin_crane
from flatctl.kappa import run_procedure
from flatctl.track import GainSet, tracking_law


@pytest.fixture(scope="session")
def academic():
    return builtin_academic()


@pytest.fixture(scope="session")
def crane():
    return builtin_crane()


@pytest.fixture(scope="session")
def academic_plan(academic):
    return run_procedure(academic)


@pytest.fixture(scope="session")
def crane_plan(crane):
    return run_procedure(crane)


@pytest.fixture(scope="session")
def academic_law(academic_plan):
    return tracking_law(academic_plan, GainSet.from_spec(academic_plan.kappa))


@pytest.fixture(scope="session")
def crane_law(crane_plan):
    return tracking_law(crane_plan, GainSet.from_spec(crane_plan.kappa))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
