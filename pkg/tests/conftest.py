import numpy as np
import pytest

from vhkg.spectral_core import FrequencyGrid, gaussian_profile
from vhkg.symbols import ConstantKernel, SymbolConfig

TWO_PI = 2.0 * np.pi


@pytest.fixture
def cfg():
    return SymbolConfig(1.0)


@pytest.fixture
def kernel():
    return ConstantKernel(1.0 / TWO_PI)


@pytest.fixture
def coarse():
    return FrequencyGrid(8.0, 65)


@pytest.fixture
def gauss(coarse):
    return gaussian_profile(0.5, coarse)


def rel_inf(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b).max() / np.abs(b).max()
