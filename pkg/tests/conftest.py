import numpy as np
import pytest

from vmmf.kernels import build_kernel_tables, build_mollifier


@pytest.fixture(scope="session")
def mol02():
    return build_mollifier(0.2)


@pytest.fixture(scope="session")
def kernel02(mol02):
    return build_kernel_tables(mol02, 1.0)


@pytest.fixture(scope="session")
def kernel02_single(mol02):
    return build_kernel_tables(mol02, 1.0, family="single")


@pytest.fixture(scope="session")
def kernel01():
    return build_kernel_tables(build_mollifier(0.1), 2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
