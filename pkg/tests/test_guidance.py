import warnings

import numpy as np
import pytest

from lunardescent import _kernels
from lunardescent.dynamics import MoonConstants
from lunardescent.guidance import (GuidanceBoundary, RankDeficiencyError, SingularSystemError,
                                   closed_loop_rollout, fit_polynomial, fit_tgo_policy, grid_search_batch,
                                   grid_search_tgo, monomial_exponents, policy_features, solve_coeffs,
                                   tgo_grid)
from lunardescent._kernels import _rollout_py

C = MoonConstants()
G = C.gravity
WIDE = (0.0, 1.0e5)


def _random_boundary(rng):
    return GuidanceBoundary(rng.uniform(-5e3, 5e3, 3), rng.uniform(-100, 100, 3), rng.uniform(-5, 5, 3),
                            rng.uniform(-5e3, 5e3, 3), rng.uniform(-100, 100, 3), rng.uniform(-5, 5, 3))


def test_zero_boundary_gives_zero_coefficients():
    b = GuidanceBoundary(np.ones(3), np.zeros(3), -G, np.ones(3), np.zeros(3), -G)
    assert np.all(solve_coeffs(b, 37.0, G).coeffs == 0)


def test_constant_net_acceleration_example():
    z = np.zeros(3)
    b = GuidanceBoundary(z, z, [1, 0, 0], [2, 0, 0], [2, 0, 0], [1, 0, 0])
    c = solve_coeffs(b, 2.0, np.zeros(3))
    assert np.allclose(c.coeffs[:, 0], [1, 0, 0, 0], atol=1e-14)
    assert np.allclose(c.coeffs[:, 1:], 0, atol=1e-14)


def test_random_boundaries_reproduced_by_double_integration(rng):
    worst = 0.0
    for _ in range(1000):
        b = _random_boundary(rng)
        T = float(np.exp(rng.uniform(0, np.log(1000))))
        c = solve_coeffs(b, T, G)
        r, v = c.integrate(b.r0, b.v0, T)
        worst = max(worst, np.max(np.abs(r - b.rf)) / (1 + np.max(np.abs(b.rf))),
                    np.max(np.abs(v - b.vf)) / (1 + np.max(np.abs(b.vf))))
        assert np.allclose(c.C0, b.a0 + G, rtol=1e-12, atol=1e-12)
        assert np.allclose(c.acceleration(T), b.af + G, rtol=1e-8, atol=1e-8)
    assert worst < 1e-8


def test_t_go_checks():
    b = GuidanceBoundary(*(np.zeros(3),) * 6)
    with pytest.raises(SingularSystemError):
        solve_coeffs(b, 0.0, G)
    with pytest.warns(RuntimeWarning):
        solve_coeffs(b, 1e-4, G)


def test_boundary_validation():
    with pytest.raises(ValueError):
        GuidanceBoundary([0, 0], *(np.zeros(3),) * 5)
    with pytest.raises(ValueError):
        GuidanceBoundary([np.nan, 0, 0], *(np.zeros(3),) * 5)


def test_hover_at_waypoint_converges_with_hover_thrust():
    x0 = np.array([0.0, 800.0, 0.0, 0, 0, 0, 900.0])
    b = GuidanceBoundary(x0[:3], x0[3:6], -G, x0[:3], x0[3:6], -G)
    res = closed_loop_rollout(x0, b, 20.0, C, (0.0, 3040.0))
    assert res.converged
    T = res.thrust[1:]
    m = res.states[1:, 6]
    assert np.allclose(T, m * 1.62, rtol=1e-9)
    assert res.position_error < 1e-9


def _descent_case():
    x0 = np.array([-3000.0, 2500.0, 200.0, 60.0, -30.0, -2.0, 950.0])
    b = GuidanceBoundary(x0[:3], x0[3:6], -G, [0, 800, 0], [0, 0, 0], -G)
    return x0, b


def test_unsaturated_rollout_meets_targets_and_matches_open_loop():
    x0, b = _descent_case()
    res = closed_loop_rollout(x0, b, 120.0, C, WIDE)
    assert res.converged
    assert res.saturated_cycles == 0
    assert res.position_error < 1.0 and res.velocity_error < 0.1
    r, v = solve_coeffs(b, 120.0, G).integrate(b.r0, b.v0, 120.0)
    span = np.linalg.norm(b.rf - b.r0)
    assert np.linalg.norm(res.final_state[:3] - r) < 1e-3 * span
    assert res.final_mass < x0[6]


def test_forced_saturation_is_reported():
    x0, b = _descent_case()
    res = closed_loop_rollout(x0, b, 30.0, C, (900.0, 1520.0))
    assert not res.converged
    assert res.saturated_cycles > 0


def test_mass_floor_is_a_status():
    x0, b = _descent_case()
    x0[6] = C.dry_mass + 1.0
    res = closed_loop_rollout(x0, b, 120.0, C, WIDE)
    assert res.status == "mass-floor"


def test_rollout_trace_table():
    x0, b = _descent_case()
    res = closed_loop_rollout(x0, b, 50.0, C, WIDE)
    tab = res.as_table()
    assert tab.shape == (501, 9)
    assert np.isnan(tab[0, 8]) and np.all(np.isfinite(tab[1:, 8]))
    assert np.allclose(np.diff(res.times), 0.1)


def test_grid_search_properties():
    x0, b = _descent_case()
    res = grid_search_tgo(x0, b, (80.0, 200.0), 5.0, C, (0.3 * 3040, 3040))
    assert res.controllable and res.label == 1
    i = res.best_index
    assert res.final_mass[i] == np.nanmax(res.final_mass)
    assert res.dm_opt >= 0
    assert res.t_go_opt == res.t_grid[i]
    assert len(res.rollout_set()) == int(np.sum(res.feasible))


def test_unreachable_state_is_labelled_uncontrollable():
    x0, b = _descent_case()
    res = grid_search_tgo(x0, b, (80.0, 200.0), 10.0, C, (0.0, 1e-9))
    assert not res.controllable and res.label == -1
    assert np.isnan(res.t_go_opt)


def test_tgo_grid():
    assert np.allclose(tgo_grid(150, 500, 1), np.arange(150, 501))
    assert tgo_grid(1, 2, 0.3)[-1] == pytest.approx(1.9)
    with pytest.raises(ValueError):
        tgo_grid(5, 1, 1)


@pytest.mark.skipif(_kernels.BACKEND != "cython", reason="compiled kernel not built")
def test_compiled_kernel_matches_numpy(rng):
    from lunardescent._kernels import _rollout_cy
    x0, b = _descent_case()
    X = x0 + rng.normal(size=(40, 7)) * [300, 300, 30, 8, 8, 2, 5]
    grid = tgo_grid(60, 240, 15)
    bounds = (0.3 * 3040, 3040)
    m_py, s_py = grid_search_batch(X, b, grid, C, bounds, kernel=_rollout_py.rollout_batch)
    m_cy, s_cy = grid_search_batch(X, b, grid, C, bounds, kernel=_rollout_cy.rollout_batch)
    assert np.array_equal(s_py, s_cy)
    assert np.allclose(m_py, m_cy, rtol=1e-10, equal_nan=True)
    assert np.any(np.isfinite(m_py)) and np.any(np.isnan(m_py))


def test_monomial_counts():
    assert len(monomial_exponents(4, 2)) == 15
    assert len(monomial_exponents(4, 3)) == 35


def test_policy_recovers_a_known_cubic(rng):
    F = rng.normal(size=(300, 4)) * [1000, 500, 10, 20] + [-3000, 6000, -20, 60]
    true = fit_polynomial(F, rng.normal(size=300), 3, ("S", "H", "w", "v"))
    true.coefficients = rng.normal(size=35)
    y = true(F)
    pol = fit_tgo_policy(F, y)
    assert np.allclose(pol.coefficients, true.coefficients, rtol=1e-6, atol=1e-9)
    assert pol.rms < 1e-9


def test_constant_labels_give_constant_policy(rng):
    F = rng.normal(size=(60, 4))
    pol = fit_tgo_policy(F, np.full(60, 212.0))
    assert np.allclose(pol(F), 212.0)
    assert pol.rms < 1e-10


def test_rank_deficiency_names_terms(rng):
    F = rng.normal(size=(60, 4))
    F[:, 3] = 2 * F[:, 2]
    with pytest.raises(RankDeficiencyError, match="dependent terms"):
        fit_tgo_policy(F, rng.normal(size=60))


def test_policy_features_order():
    x = np.array([[1, 2, 3, 4, 5, 6, 7.0]])
    assert np.array_equal(policy_features(x), [[1, 2, 5, 4]])


def test_surrogate_round_trip(rng):
    F = rng.normal(size=(50, 4))
    pol = fit_tgo_policy(F, rng.normal(size=50))
    again = type(pol).from_dict(pol.to_dict())
    assert np.allclose(again(F), pol(F))
