import math

import numpy as np
import pytest

from nonloc_homog.cell import cell_solution
from nonloc_homog.effective import effective_matrix
from nonloc_homog.fiber import make_grid
from nonloc_homog.harness import constants_bundle
from nonloc_homog.kernels import KernelSpec, MuSpec


class Case:
    """Box kernel r=1/2 with the cosine modulation alpha=1/2 on a 64-point grid."""

    def __init__(self, a, mu, grid):
        self.a, self.mu, self.grid = a, mu, grid
        self.cell = cell_solution(a, mu, grid)
        self.g0 = effective_matrix(a, mu, grid, self.cell)
        self.constants = constants_bundle(a, mu, grid)


@pytest.fixture(scope="session")
def cosine_case():
    return Case(KernelSpec.box(0.5), MuSpec.cosine_product(0.5), make_grid(1, 64))


@pytest.fixture(scope="session")
def constant_case():
    return Case(KernelSpec.box(0.5), MuSpec.constant(1.0), make_grid(1, 64))


@pytest.fixture(scope="session")
def gaussian2d_case():
    return Case(KernelSpec.gaussian(0.25, d=2), MuSpec.cosine_product(0.5, d=2), make_grid(2, 12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


BOX_CPI = 1 - 2 / math.pi


ACCEPTANCE_LINES = {}


def record(number: int, passed: bool, detail: str):
    """Store the verdict line of an acceptance criterion; printed in the terminal summary."""
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
