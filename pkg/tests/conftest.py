import numpy as np
import pytest

from cbeam.geometry import AcquisitionWindow, ScanGeometry
from cbeam.pulse import PulseSpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_window():
    # 40 us at 50 MHz: 2000 samples
    return AcquisitionWindow(40e-6, 50e6)


@pytest.fixture(scope="session")
def small_geometry():
    return ScanGeometry.uniform(8, 0.2265e-3)


@pytest.fixture(scope="session")
def pulse():
    return PulseSpec()
