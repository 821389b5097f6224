import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("brve", deadline=None, max_examples=60)
settings.load_profile("brve")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pm1(rng, shape):
    """Random {-1, +1} float array."""
    return rng.choice(np.array([-1.0, 1.0]), shape)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
