import numpy as np
import pytest

from conftest import double_integrator
from lunardescent.sqp import SolverOptions, solve
from lunardescent.transcription import (BoundaryConstraint, LinkageSpec, MultiphaseProblem, PhaseGuess,
                                        PhaseSpec, PhaseValues, Transcription, assemble_cost,
                                        assemble_defects)
from lunardescent.lgr import lgr_grid


def _solve(problem, **kw):
    tr = Transcription(problem)
    res = solve(tr.to_nlp(), SolverOptions(**kw))
    return tr, res, tr.layout.unpack(res.z)


def test_double_integrator_oracle():
    tr, res, (ph,) = _solve(double_integrator(10))
    assert res.converged
    assert abs(res.objective - 12.0) < 1e-4
    t = 0.5 * (ph.tf - ph.t0) * tr.grids[0].collocation_nodes + 0.5 * (ph.tf + ph.t0)
    assert np.max(np.abs(ph.controls[:, 0] - (6 - 12 * t))) < 1e-4
    tn = 0.5 * tr.grids[0].nodes + 0.5
    assert np.max(np.abs(ph.states[:, 0] - (3 * tn**2 - 2 * tn**3))) < 1e-6


def test_exact_solution_has_zero_defects():
    grid = lgr_grid(5)
    t = 0.5 * grid.nodes + 0.5
    X = np.column_stack([3 * t**2 - 2 * t**3, 6 * t - 6 * t**2])
    U = (6 - 12 * t[:-1])[:, None]
    phase = double_integrator(5).phases[0]
    vals = PhaseValues(X, U, 0.0, 1.0)
    assert np.max(np.abs(assemble_defects(phase, grid, vals))) < 1e-12
    # the quadrature is exact for the quadratic integrand
    assert abs(assemble_cost(double_integrator(5), [grid], [vals]) - 12.0) < 1e-12


def test_pack_unpack_round_trip(di_transcription, rng):
    z = rng.normal(size=di_transcription.layout.size)
    again = di_transcription.layout.pack(di_transcription.layout.unpack(z))
    assert np.allclose(again, z)


def test_analytic_jacobian_matches_finite_differences(di_transcription, rng):
    tr = di_transcription
    z = tr.initial_guess() + 0.1 * rng.normal(size=tr.layout.size)
    J = tr.eq_jacobian(z)
    J = J.toarray() if hasattr(J, "toarray") else np.asarray(J)
    h = 1e-6
    fd = np.column_stack([(tr.eq_constraints(z + h * e) - tr.eq_constraints(z - h * e)) / (2 * h)
                          for e in np.eye(tr.layout.size)])
    assert np.max(np.abs(J - fd)) < 1e-6
    g = tr.objective_gradient(z)
    fdg = np.array([(tr.objective(z + h * e) - tr.objective(z - h * e)) / (2 * h) for e in np.eye(tr.layout.size)])
    assert np.max(np.abs(g - fdg)) < 1e-6


def test_two_phase_linkage_gives_same_optimum():
    def phase(t0, tf, x0, xf):
        bcs = []
        if x0 is not None:
            bcs.append(BoundaryConstraint(lambda a, u0, t0_, b, uf, tf_, p: np.asarray(a), x0, x0))
        if xf is not None:
            bcs.append(BoundaryConstraint(lambda a, u0, t0_, b, uf, tf_, p: np.asarray(b), xf, xf))
        return PhaseSpec(state_dim=2, control_dim=1, n_collocation=6,
                         dynamics=lambda X, U, t, p: np.column_stack([X[:, 1], U[:, 0]]),
                         lagrange_cost=lambda X, U, t, p: U[:, 0] ** 2, boundary_constraints=bcs,
                         t0_bounds=(t0, t0), tf_bounds=(tf, tf),
                         guess=PhaseGuess(t0, tf, [0, 0], [1, 0], [0.0]))

    link = LinkageSpec(0, 1, lambda xf, uf, tf, x0, u0, t0: np.r_[xf - x0, tf - t0], [0, 0, 0], [0, 0, 0])
    prob = MultiphaseProblem([phase(0.0, 0.5, [0, 0], None), phase(0.5, 1.0, None, [1, 0])], [link])
    _, res, (a, b) = _solve(prob)
    assert res.converged
    assert abs(res.objective - 12.0) < 1e-6
    assert np.allclose(a.states[-1], [0.5, 1.5], atol=1e-6)


def test_free_final_time_with_control_bounds():
    # minimum time, |u| <= 1: bang-bang, t_f = 2
    prob = MultiphaseProblem([PhaseSpec(
        state_dim=2, control_dim=1, n_collocation=12,
        dynamics=lambda X, U, t, p: np.column_stack([X[:, 1], U[:, 0]]),
        mayer_cost=lambda x0, t0, xf, tf, p: tf,
        boundary_constraints=[BoundaryConstraint(
            lambda x0, u0, t0, xf, uf, tf, p: np.r_[x0, xf], [0, 0, 1, 0], [0, 0, 1, 0])],
        control_lower=[-1], control_upper=[1], t0_bounds=(0, 0), tf_bounds=(0.5, 5),
        guess=PhaseGuess(0.0, 3.0, [0, 0], [1, 0], [0.0]))])
    _, res, (ph,) = _solve(prob, max_iterations=200)
    assert res.converged
    assert abs(ph.tf - 2.0) < 2e-2


@pytest.mark.parametrize("kwargs, match", [
    (dict(state_dim=0), "state"),
    (dict(n_collocation=0), "n_collocation"),
    (dict(control_lower=[2], control_upper=[1]), "control"),
    (dict(state_scale=[1, -1]), "scales"),
])
def test_phase_validation(kwargs, match):
    base = dict(state_dim=2, control_dim=1, n_collocation=4, dynamics=lambda X, U, t, p: X)
    base.update(kwargs)
    with pytest.raises(ValueError, match=match):
        PhaseSpec(**base)


def test_linkage_validation():
    with pytest.raises(ValueError):
        LinkageSpec(1, 0, lambda *a: 0, [0], [0])
    p = double_integrator().phases[0]
    with pytest.raises(ValueError):
        MultiphaseProblem([p], [LinkageSpec(0, 3, lambda *a: 0, [0], [0])])
    with pytest.raises(ValueError):
        MultiphaseProblem([])
