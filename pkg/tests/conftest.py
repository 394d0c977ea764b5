import numpy as np
import pytest

from tumblecap import target

#: Reference target: principal inertia diag(400, 500, 700) kg m^2, mass 1600 kg.
TABLE_INERTIA = target.PrincipalInertia(400.0, 500.0, 700.0, m=1600.0)
TABLE_OFFSET = np.array([-0.25, -0.1, 0.05])
TABLE_SIGMA = np.array([-0.5, 0.6])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


#: One outcome line per acceptance criterion, filled by test_acceptance.py.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
