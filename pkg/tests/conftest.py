import numpy as np
import pytest

from tracefem import build_box_mesh, discretize, make_problem, make_surface

BOX = ((-4.0 / 3.0,) * 3, (4.0 / 3.0,) * 3)


@pytest.fixture(scope="session")
def sphere():
    return make_surface("sphere", radius=1.0)


@pytest.fixture(scope="session")
def harmonic():
    return make_problem("sphere_harmonic")


@pytest.fixture(scope="session")
def disc8(sphere):
    return discretize(sphere, build_box_mesh(BOX, 8), 1, 1)


@pytest.fixture(scope="session")
def disc8_p2(sphere):
    return discretize(sphere, build_box_mesh(BOX, 8), 2, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
