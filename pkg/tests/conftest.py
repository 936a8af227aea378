import pytest

from qlinksim.cqed import PhysicalParams, design_pulses


@pytest.fixture(scope="session")
def ideal_params():
    return PhysicalParams(g=5.0, Delta=10.0)


@pytest.fixture(scope="session")
def pulses(ideal_params):
    return design_pulses(ideal_params, T=30.0)
