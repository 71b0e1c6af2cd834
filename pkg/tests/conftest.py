import numpy as np
import pytest

from invlp import ipm
from invlp.lp import LinearProgram, degeneracy_report, random_feasible_lp


# filled by test_acceptance.py, one line per criterion
ACCEPTANCE_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def figure1_lp():
    """Figure-1 LP at u = 1, w = (-0.5, -0.2), written out by hand."""
    c = [np.cos(-0.7), np.sin(-0.7)]
    A = [[-0.8, 0.0], [0.0, -0.5], [1.0, 1.0]]
    b = [0.5, 0.2, 0.3]
    return LinearProgram(c, A, b)


def nondegenerate_lps(rng, count, max_D=4, max_M1=8, max_M2=1, settings=None):
    """Rejection-sample random LPs whose optimum is a unique non-degenerate vertex."""
    settings = settings or ipm.IpmSettings.tight(1e-10)
    out = []
    while len(out) < count:
        D = int(rng.integers(2, max_D + 1))
        M1 = int(rng.integers(D + 1, max_M1 + 1))
        M2 = int(rng.integers(0, min(max_M2, D - 1) + 1))
        lp = random_feasible_lp(rng, D, M1, M2)
        sol = ipm.solve(lp, settings)
        if not sol.optimal:
            continue
        rep = degeneracy_report(lp, sol)
        # vertex optimum with strictly complementary duals
        if rep.is_degenerate or rep.weakly_active:
            continue
        if len(rep.strictly_active) + lp.M2 != D:
            continue
        slack = lp.b - lp.A @ sol.x
        inactive = np.setdiff1d(np.arange(lp.M1), rep.active_inequalities)
        if inactive.size and slack[inactive].min() < 1e-3:
            continue
        if len(rep.strictly_active) and (-sol.lam[list(rep.strictly_active)]).min() < 1e-3:
            continue
        out.append((lp, sol))
    return out


@pytest.fixture
def fig1_lp():
    return figure1_lp()
