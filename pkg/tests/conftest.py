import numpy as np
import pytest

from memctrl import config


@pytest.fixture(scope="session")
def cfg():
    c = config.default_config()
    c.validate()
    return c


@pytest.fixture()
def rng():
    # function-scoped: draws must not depend on test execution order
    return np.random.default_rng(20240817)
