import numpy as np
import pytest
from hypothesis import settings

from hurdlecast.covspec import default_spec
from hurdlecast.simulate import SimulationConfig, simulate_panel

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# acceptance results collected by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def spec():
    return default_spec()


@pytest.fixture(scope="session")
def small_sim():
    """Six countries, eight cells each, 48 months."""
    return simulate_panel(SimulationConfig(n_countries=6, cells_per_country=8, n_months=48, seed=11))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
