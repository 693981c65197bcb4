import math

import numpy as np
import pytest

from lunardescent import dynamics as dyn
from lunardescent.mission import (MissionConfig, PHASE_NAMES, boundary_residuals, build_forward_pass,
                                  extract_waypoints, solve_forward_pass, verify_solution)
from lunardescent.sqp import SolverOptions

SMALL = (6, 6, 5)


@pytest.fixture(scope="module")
def solution():
    return solve_forward_pass(MissionConfig(collocation=SMALL), SolverOptions(max_iterations=300))


def test_phase_thrust_limits():
    cfg = MissionConfig()
    assert cfg.thrust_bounds(0) == pytest.approx((912.0, 3040.0))
    assert cfg.thrust_bounds(1) == pytest.approx((912.0, 3040.0))
    assert cfg.thrust_bounds(2) == pytest.approx((456.0, 1520.0))


@pytest.mark.parametrize("kw", [
    dict(v_sops=-1.0), dict(v_sops=0.0), dict(rough_braking_altitude=40_000.0),
    dict(collocation=(10, 10)), dict(collocation=(0, 10, 10)), dict(min_thrust_fraction=1.0),
    dict(duration_bounds=((100, 50), (1, 2), (1, 2))), dict(initial_mass=300.0),
    dict(landing_latitude_deg=90.0),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        MissionConfig(**kw)


def test_problem_structure():
    prob = build_forward_pass(MissionConfig(collocation=SMALL))
    assert [p.name for p in prob.phases] == list(PHASE_NAMES)
    assert [(link.left, link.right) for link in prob.linkages] == [(0, 1), (1, 2)]
    assert [p.n_collocation for p in prob.phases] == list(SMALL)


def test_small_forward_pass_converges(solution):
    assert solution.converged
    assert 0 < solution.propellant < MissionConfig().initial_mass - MissionConfig().constants.dry_mass
    worst = max(float(np.max(v)) for v in boundary_residuals(solution).values())
    assert worst < 1e-6


def test_durations_and_thrust_within_bounds(solution):
    cfg = solution.config
    for i, ph in enumerate(solution.phases):
        lo, hi = cfg.duration_bounds[i]
        assert lo - 1e-6 <= ph.duration <= hi + 1e-6
        tmin, tmax = cfg.thrust_bounds(i)
        T = ph.controls[:, 0]
        assert np.all(T >= tmin - 1e-6 * tmax) and np.all(T <= tmax * (1 + 1e-6))


def test_waypoints_in_site_frame(solution):
    wp = extract_waypoints(solution)
    rb, fb, td = (wp[n] for n in PHASE_NAMES)
    assert np.allclose(fb.rf, [0, 800, 0], atol=1e-5)
    assert np.allclose(fb.vf, 0, atol=1e-6)
    assert np.allclose(td.rf, 0, atol=1e-5) and np.allclose(td.vf, 0, atol=1e-6)
    # rough braking leaves at 7.4 km above the mean surface, below the camera speed ceiling
    assert rb.rf[1] + solution.config.terrain_elevation == pytest.approx(7400.0, abs=1e-3)
    assert abs(rb.vf[0]) <= solution.config.v_sops + 1e-6
    assert rb.r0[1] + solution.config.terrain_elevation == pytest.approx(30_000.0, abs=1e-3)
    assert np.linalg.norm(rb.v0) == pytest.approx(1680.0, rel=1e-9)
    assert rb.m0 == pytest.approx(1729.0)
    assert fb.m0 < rb.mf  # the attitude hold burns propellant
    with pytest.raises(KeyError):
        wp["nope"]


def test_attitude_hold_links_the_braking_phases(solution):
    cfg = solution.config
    rb, fb = solution.phases[:2]
    T = rb.raw_at_nodes()[-1, 0]
    end = dyn.propagate_attitude_hold(rb.states[-1], T, cfg.constants, cfg.attitude_hold_duration,
                                      cfg.attitude_hold_alpha_deg, cfg.attitude_hold_step)
    scale = np.array([1e4, .1, .1, 100, 100, 1000, 1000])
    assert np.max(np.abs(end - fb.states[0]) / scale) < 1e-8
    assert rb.control_at_nodes()[-1, 1] == pytest.approx(math.radians(50.0), abs=1e-6)


def test_verification_report_shape(solution):
    rep = verify_solution(solution)
    assert [p["name"] for p in rep["phases"]] == list(PHASE_NAMES)
    for p in rep["phases"]:
        assert p["thrust_bound_violation"] < 1e-6 * 3040
        assert len(p["terminal_mismatch"]) == 7
    # six nodes per phase: what is left is the collocation error of the coarse grid
    assert all(p["max_mismatch"] < 1e-2 for p in rep["phases"])
    assert all(p["mass_bookkeeping_error"] < 1e-5 for p in rep["phases"])


def test_linear_control_replay_is_coarser(solution):
    lag = verify_solution(solution)["phases"]
    lin = verify_solution(solution, interpolation="linear")["phases"]
    assert lin[2]["max_mismatch"] > lag[2]["max_mismatch"]
    with pytest.raises(ValueError):
        verify_solution(solution, interpolation="cubic")


def test_summary_and_downrange(solution):
    s = solution.summary()
    assert s["status"] == "converged"
    assert len(s["durations_s"]) == 3
    assert solution.total_downrange > 5e5
