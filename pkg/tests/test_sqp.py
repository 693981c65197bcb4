import time

import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import double_integrator
from lunardescent.sqp import NumericalFailure, SolverOptions, fd_jacobian, qp_subproblem, solve
from lunardescent.transcription import NlpProblem, Transcription


def _nlp(f, x0, g=None, h=None, lower=None, upper=None, m_eq=0, m_ineq=0):
    n = len(x0)
    return NlpProblem(
        n=n, objective=f,
        eq_constraints=g or (lambda z: np.zeros(0)), ineq_constraints=h or (lambda z: np.zeros(0)),
        lower=np.full(n, -np.inf) if lower is None else np.asarray(lower, float),
        upper=np.full(n, np.inf) if upper is None else np.asarray(upper, float),
        x0=np.asarray(x0, float), m_eq=m_eq, m_ineq=m_ineq)


def test_qp_matches_scipy(rng):
    n = 6
    A = rng.normal(size=(n, n))
    H = A @ A.T + n * np.eye(n)
    c = rng.normal(size=n)
    AE, bE = rng.normal(size=(1, n)), rng.normal(size=1)
    AI, bI = rng.normal(size=(3, n)), np.abs(rng.normal(size=3))
    lo, hi = -np.ones(n), np.ones(n)
    res = qp_subproblem(H, c, AE, bE, AI, bI, lo, hi)
    assert res.status == "optimal"
    ref = minimize(lambda d: 0.5 * d @ H @ d + c @ d, np.zeros(n), jac=lambda d: H @ d + c,
                   constraints=[{"type": "eq", "fun": lambda d: AE @ d - bE},
                                {"type": "ineq", "fun": lambda d: bI - AI @ d}],
                   bounds=list(zip(lo, hi)), method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    assert np.allclose(res.step, ref.x, atol=1e-6)
    # stationarity with the documented multiplier convention
    r = (H @ res.step + c + AE.T @ res.eq_multipliers + AI.T @ res.ineq_multipliers
         + res.upper_multipliers - res.lower_multipliers)
    assert np.max(np.abs(r)) < 1e-8
    assert np.all(res.ineq_multipliers >= -1e-12)


def test_qp_reports_inconsistent_constraints():
    res = qp_subproblem(np.eye(2), np.zeros(2), ineq_matrix=[[1, 0], [-1, 0]], ineq_rhs=[-1, -1])
    assert res.status in ("infeasible", "inconsistent")


def test_hs071():
    f = lambda z: z[0] * z[3] * (z[0] + z[1] + z[2]) + z[2]
    g = lambda z: np.array([z @ z - 40.0])
    h = lambda z: np.array([25.0 - np.prod(z)])
    res = solve(_nlp(f, [1, 5, 5, 1], g, h, [1] * 4, [5] * 4, 1, 1))
    assert res.converged
    assert abs(res.objective - 17.0140173) < 1e-6
    assert np.allclose(res.z, [1.0, 4.7429994, 3.8211503, 1.3794082], atol=1e-5)


def test_rosenbrock_unconstrained():
    f = lambda z: 100 * (z[1] - z[0] ** 2) ** 2 + (1 - z[0]) ** 2
    res = solve(_nlp(f, [-1.2, 1.0]), SolverOptions(max_iterations=300))
    assert res.converged
    assert np.allclose(res.z, [1, 1], atol=1e-5)


def test_infeasible_problem_is_reported():
    g = lambda z: np.array([z[0] ** 2 + 1.0])
    res = solve(_nlp(lambda z: z @ z, [0.5, 0.5], g, m_eq=1), SolverOptions(max_iterations=50))
    assert not res.converged
    assert res.status in ("infeasible", "max-iterations")
    assert res.eq_violation > 0.5


def test_nonfinite_start_is_a_status_not_a_crash():
    res = solve(_nlp(lambda z: np.nan, [1.0]))
    assert res.status == "numerical-failure"
    with pytest.raises(NumericalFailure):
        fd_jacobian(lambda z: np.array([np.inf]), np.array([1.0]))


def test_time_limit_stops_early():
    tr = Transcription(double_integrator(30))
    t0 = time.perf_counter()
    res = solve(tr.to_nlp(), SolverOptions(time_limit=1e-6))
    assert time.perf_counter() - t0 < 5
    assert res.status == "max-iterations"


@pytest.mark.parametrize("kw", [dict(kkt_tolerance=0), dict(max_iterations=0), dict(backtrack=1.0),
                                dict(penalty_factor=0.5), dict(hessian_floor=0), dict(time_limit=-1)])
def test_option_validation(kw):
    with pytest.raises(ValueError):
        SolverOptions(**kw)


def test_fd_jacobian():
    J = fd_jacobian(lambda z: np.array([z[0] * z[1], np.sin(z[0])]), np.array([0.3, 2.0]))
    assert np.allclose(J, [[2.0, 0.3], [np.cos(0.3), 0]], atol=1e-7)


def test_iteration_log_records(tmp_path):
    records = []
    log = tmp_path / "it.jsonl"
    solve(Transcription(double_integrator(6)).to_nlp(),
          SolverOptions(iteration_log=records.append, log_file=str(log)))
    assert records and {"iteration"} <= set(records[0])
    assert len(log.read_text().splitlines()) == len(records)
