import numpy as np
import pytest

from laurel.data import gaussian_mixture_splits

# filled by test_acceptance.py, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mixture():
    return gaussian_mixture_splits(10, 64, 500, 100, 0.3, 7)
