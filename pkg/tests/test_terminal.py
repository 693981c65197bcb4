import numpy as np
import pytest

from lunardescent.dynamics import MoonConstants
from lunardescent.terminal import (SaturationError, TerminalSequenceConfig, TerminalSequenceError,
                                   hover_thrust, simulate_terminal_sequence)

C = MoonConstants()
START = np.array([0.0, 800.0, 0.0, 0.0, 0.0, 0.0, 911.5])


@pytest.fixture(scope="module")
def default_run():
    return simulate_terminal_sequence(START)


def test_hover_thrust_example():
    assert hover_thrust(np.r_[np.zeros(6), 800.0], C) == pytest.approx(1296.0)


def test_hover_thrust_limits():
    with pytest.raises(SaturationError):
        hover_thrust(np.r_[np.zeros(6), 1000.0], C, (0.0, 1500.0))
    # below the floor the thrust is clamped up
    assert hover_thrust(np.r_[np.zeros(6), 800.0], C, (1400.0, 3000.0)) == 1400.0
    with pytest.raises(ValueError):
        hover_thrust(np.zeros(7), C)


def test_rate_feedback_sign():
    sinking = np.array([0, 100, 0, 0, -1.0, 0, 800.0])
    assert hover_thrust(sinking, C, (0.0, 3040.0)) == pytest.approx(800 * (1.62 + 1.0))


def test_segment_order_and_durations(default_run):
    assert default_run.labels()[0] == "hover"
    assert [s.label for s in default_run.segments] == [
        "hover", "descent", "hazard_hover", "retarget", "approach", "constant_rate"]
    assert default_run.segment("hover").duration == pytest.approx(12.0)
    assert default_run.segment("hazard_hover").duration == pytest.approx(15.0)
    with pytest.raises(KeyError):
        default_run.segment("missing")


def test_hover_holds_altitude(default_run):
    y = default_run.segment("hover").states[:, 1]
    assert np.max(np.abs(y - 800.0)) < 0.1
    hh = default_run.segment("hazard_hover").states[:, 1]
    assert np.max(np.abs(hh - 150.0)) < 0.1


def test_hover_propellant_matches_closed_form():
    # T = m g tracks the mass, so m(t) = m0 exp(-g t / ve)
    cfg = TerminalSequenceConfig(first_hover=10.0)
    start = np.r_[0.0, 800.0, 0, 0, 0, 0, 800.0]
    run = simulate_terminal_sequence(start, cfg)
    exact = 800.0 * (1 - np.exp(-1.62 * 10.0 / C.exhaust_velocity))
    # thrust is held over each 0.1 s step, hence the small zero-order-hold gap
    assert run.segment("hover").propellant == pytest.approx(exact, rel=1e-5)


def test_default_touchdown(default_run):
    x = default_run.touchdown
    assert x[1] == pytest.approx(0.0, abs=1e-9)
    assert -1.2 <= x[4] <= 0.0
    assert default_run.lateral_error < 1.0
    assert default_run.segment("constant_rate").duration == pytest.approx(10.0, abs=0.5)
    assert np.allclose(default_run.site, [30.0, 0.0, 0.0])


def test_thrust_within_two_engine_limits(default_run):
    lo, hi = TerminalSequenceConfig().thrust_bounds(C)
    T = default_run.as_table()[:, 8]
    assert np.all(T >= lo - 1e-9) and np.all(T <= hi + 1e-9)
    assert np.allclose(np.linalg.norm(default_run.thrust_vectors(), axis=1), T)


def test_time_and_mass_monotone(default_run):
    tab = default_run.as_table()
    assert np.all(np.diff(tab[:, 0]) >= 0)
    assert np.all(np.diff(tab[:, 7]) <= 1e-12)
    assert default_run.total_propellant == pytest.approx(tab[0, 7] - tab[-1, 7])


@pytest.mark.parametrize("offset", [0.0, (0.0, 25.0), (-20.0, 10.0)])
def test_other_offsets(offset):
    run = simulate_terminal_sequence(START, TerminalSequenceConfig(safe_site_offset=offset))
    assert run.lateral_error < 1.0
    assert -1.2 <= run.touchdown[4] <= 0.0


def test_saturation_surfaces_with_partial_trajectory():
    heavy = START.copy()
    heavy[6] = 1000.0  # hover needs 1620 N > 1520 N
    with pytest.raises(TerminalSequenceError) as info:
        simulate_terminal_sequence(heavy)
    assert "saturation" in str(info.value)
    assert info.value.trajectory.segments == [] or info.value.trajectory.segments[0].label == "hover"


@pytest.mark.parametrize("kw", [
    dict(intermediate_altitude=50.0), dict(hazard_decision_time=30.0), dict(descent_rate=1.0),
    dict(first_hover=0.0), dict(safe_site_offset=(1.0, 2.0, 3.0)),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TerminalSequenceConfig(**kw)
