import pytest

from quasitrans.mode_solver import Grid1D, builtin_profile, compute_mode
from quasitrans.transmission_solver import SolverConfig, TransmissionProblem, solve

OMEGA0 = 3.0
EPS_REF = 3e-4


@pytest.fixture(scope="session")
def fig1():
    return builtin_profile("fig1")


@pytest.fixture(scope="session")
def fine_grid():
    return Grid1D.symmetric(40.0, 1e-3)


@pytest.fixture(scope="session")
def mode(fig1, fine_grid):
    """Mode of the fig1 profile at omega0 = 3 on [-40, 40], h1 = 1e-3."""
    return compute_mode(fig1, OMEGA0, fine_grid)


@pytest.fixture(scope="session")
def coarse_mode(fig1):
    return compute_mode(fig1, OMEGA0, Grid1D.symmetric(20.0, 2e-3))


@pytest.fixture(scope="session")
def problem_coarse(mode, fig1):
    return TransmissionProblem(SolverConfig(eps=EPS_REF, mode=mode, profile=fig1, h=0.2))


@pytest.fixture(scope="session")
def state_coarse(problem_coarse):
    return solve(problem_coarse)


@pytest.fixture(scope="session")
def problem_ref(mode, fig1):
    return TransmissionProblem(SolverConfig(eps=EPS_REF, mode=mode, profile=fig1, h=0.05))


@pytest.fixture(scope="session")
def state_ref(problem_ref):
    return solve(problem_ref)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[key])
