import pytest

from paramgate.device import load_device
from paramgate.experiments import calibrate_all


@pytest.fixture(scope="session")
def device():
    return load_device()


@pytest.fixture(scope="session")
def cals(device):
    """Closed-system calibrations of the three stored CZ operating points."""
    return calibrate_all(device)


@pytest.fixture(scope="session")
def cal01(cals):
    return cals[(0, 1)]
