import numpy as np
import pytest

from lunardescent.transcription import (BoundaryConstraint, MultiphaseProblem, PhaseGuess, PhaseSpec,
                                        Transcription)


def double_integrator(n=10, lower=None, upper=None):
    """Rest-to-rest double integrator, x: 0 -> 1 in one second, min int u^2."""
    return MultiphaseProblem([PhaseSpec(
        state_dim=2, control_dim=1, n_collocation=n,
        dynamics=lambda X, U, t, p: np.column_stack([X[:, 1], U[:, 0]]),
        lagrange_cost=lambda X, U, t, p: U[:, 0] ** 2,
        boundary_constraints=[BoundaryConstraint(
            lambda x0, u0, t0, xf, uf, tf, p: np.array([x0[0], x0[1], xf[0], xf[1]]),
            [0, 0, 1, 0], [0, 0, 1, 0])],
        control_lower=lower, control_upper=upper,
        t0_bounds=(0.0, 0.0), tf_bounds=(1.0, 1.0),
        guess=PhaseGuess(0.0, 1.0, [0, 0], [1, 0], [0.0]),
    )])


@pytest.fixture
def di_transcription():
    return Transcription(double_integrator())


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
