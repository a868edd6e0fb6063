import numpy as np
import pytest

from discrn import problem


def rel_err(a, b):
    """Relative error with a unit floor on the scale (derivatives can vanish)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


@pytest.fixture(scope="session")
def nonconvex():
    return problem.make_nonconvex_scenario(40, 0)


@pytest.fixture(scope="session")
def ev():
    return problem.make_ev_tou_scenario(25, 60, 0)


@pytest.fixture(scope="session")
def two_driver():
    return problem.make_two_driver_example("sunny")
