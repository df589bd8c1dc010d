import sys

import numpy as np
import pytest

from mscbf.fields import build_basis


@pytest.fixture(scope="session")
def basis():
    """Desk-scale basis: k_max=4 on a 24x24 grid, alias-free up to r=5."""
    return build_basis(4, 24, 5)


@pytest.fixture(scope="session")
def small_basis():
    return build_basis(2, 16, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = [mod.RESULTS[k] for k in sorted(mod.RESULTS)] if mod else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
