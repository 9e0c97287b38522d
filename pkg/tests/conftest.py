import numpy as np
import pytest

from pstein.benchmarks import (assemble_linear_problem,
                               assemble_lognormal_problem)


@pytest.fixture(scope="session")
def linear17():
    return assemble_linear_problem(4)


@pytest.fixture(scope="session")
def linear65():
    return assemble_linear_problem(6)


@pytest.fixture(scope="session")
def linear257():
    return assemble_linear_problem(8)


@pytest.fixture(scope="session")
def lognormal33():
    return assemble_lognormal_problem(33, s=7)


@pytest.fixture(scope="session")
def lognormal65():
    return assemble_lognormal_problem(65, s=15, noise_pct=0.1)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
