import numpy as np
import pytest

from greenlab.coeff import identity_field, sample_two_phase, scalar_two_phase
from greenlab.lattice import build_domain


@pytest.fixture
def box9():
    return build_domain({"d": 2, "extents": [9, 9]})


@pytest.fixture
def two_phase_11():
    dom = build_domain({"d": 2, "extents": [11, 11]})
    return sample_two_phase(scalar_two_phase(0.25, 1.0, 0.5, 11, 2), 0, dom)


@pytest.fixture
def identity_5():
    return identity_field(build_domain({"d": 2, "extents": [5, 5]}))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts collected by tests/test_acceptance.py, echoed once at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
