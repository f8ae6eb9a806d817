import numpy as np
import pytest

from tetsim import IntegratorConfig, MaterialParams, SolveMode, SolverConfig, generate_beam
from tetsim import krylov

# Filled by test_acceptance; echoed after the run so the per-criterion lines
# survive output capturing.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def params():
    return MaterialParams(young_modulus=1e5, poisson_ratio=0.3, density=1000.0)


@pytest.fixture
def small_beam():
    """72-node beam clamped at one end, small enough for dense oracles."""
    mesh = generate_beam(3, 3, 8, 0.1)
    base = np.flatnonzero(mesh.nodes[:, 2] == 0.0)
    return mesh.with_fixed_nodes(base)


@pytest.fixture
def cg_solve():
    cfg = SolverConfig(tolerance=1e-10, max_iterations=5000, mode=SolveMode.CG)

    def solve(a, b):
        return krylov.cg(a, b, cfg)

    return solve


@pytest.fixture
def default_integrator_config():
    return IntegratorConfig(dt=0.01, gravity=(0.0, 0.0, -9.81))
