import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scopflearn.cases import micro5, triangle3
from scopflearn.grid import GridCase, build_factors, screen_contingencies


@pytest.fixture(scope="session")
def tri_case():
    return triangle3()


@pytest.fixture(scope="session")
def tri_factors(tri_case):
    return build_factors(tri_case)


@pytest.fixture(scope="session")
def tri_cont(tri_case, tri_factors):
    return screen_contingencies(tri_case, tri_factors)


@pytest.fixture(scope="session")
def m5_case():
    return micro5()


@pytest.fixture(scope="session")
def m5_factors(m5_case):
    return build_factors(m5_case)


@pytest.fixture(scope="session")
def m5_cont(m5_case, m5_factors):
    return screen_contingencies(m5_case, m5_factors)


def make_two_bus():
    """Single line 0->1, generator at bus 0 serving a load at bus 1."""
    return GridCase(
        n_bus=2,
        gen_bus=[0],
        glb=[0.0],
        gub0=[2.0],
        c0=[1000.0],
        gamma=[1.0],
        line_from=[0],
        line_to=[1],
        susceptance=[1.0],
        flb=[-2.0],
        fub=[2.0],
        load_bus=[1],
        d0=[1.0],
        slack_bus=0,
        name="twobus",
    )


def make_mesh8(seed=7):
    """8-bus mesh with a radial spur (bus 7), mixed susceptances."""
    rng = np.random.default_rng(seed)
    line_from = [0, 0, 1, 1, 2, 3, 4, 5, 2, 6]
    line_to = [1, 2, 2, 3, 4, 4, 5, 0, 6, 7]
    n_line = len(line_from)
    return GridCase(
        n_bus=8,
        gen_bus=[0, 3, 5],
        glb=[0.0, 0.0, 0.0],
        gub0=[2.0, 1.5, 1.0],
        c0=[900.0, 1500.0, 2400.0],
        gamma=[0.7, 0.7, 0.7],
        line_from=line_from,
        line_to=line_to,
        susceptance=list(rng.uniform(2.0, 12.0, n_line)),
        flb=[-1.5] * n_line,
        fub=[1.5] * n_line,
        load_bus=[1, 2, 4, 6, 7],
        d0=[0.2, 0.3, 0.25, 0.15, 0.1],
        slack_bus=0,
        name="mesh8",
    )


@pytest.fixture(scope="session")
def mesh8_case():
    return make_mesh8()
