import numpy as np
import pytest
from hypothesis import settings

from rarebias.dynamics import SimConfig
from rarebias.potentials import PotentialSpec

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

PAPER = PotentialSpec("paper2d", {"tilt": 0.05})


@pytest.fixture(scope="session")
def paper():
    return PAPER


@pytest.fixture
def hot_cfg():
    # short horizon and high temperature so transitions are common
    return SimConfig(temperature=5000.0, n_steps=300)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
