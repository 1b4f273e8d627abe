import numpy as np
import pytest

from flowbox.odeint import IntegratorConfig


@pytest.fixture(scope="session")
def tight_cfg():
    """Integrator accuracy high enough that 1e-5 finite differences of
    chart values stay trustworthy."""
    return IntegratorConfig(abs_tol=1e-12, rel_tol=1e-12)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(20260818))
