"""Scripted terminal-descent sequence with two engines.

Hover, guided vertical descent to 150 m, a second hover while the hazard
decision is taken, retargeting to 60 m above the safe site, guided descent
to 10 m at -1 m/s and a constant-rate descent to touchdown.  Altitudes are
above the local terrain (the flat-frame origin).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import LocalState, MoonConstants, flat_eom, rk4_step
from .guidance import GuidanceBoundary, closed_loop_rollout, grid_search_batch, tgo_grid


class SaturationError(ValueError):
    """Required thrust is outside the engine limits."""


class TerminalSequenceError(RuntimeError):
    """A segment failed; ``trajectory`` holds the segments flown so far."""

    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass
class TerminalSequenceConfig:
    first_hover: float = 12.0  # s
    intermediate_altitude: float = 150.0  # m
    second_hover_max: float = 22.0  # s
    hazard_decision_time: float = 15.0  # s, hover time before retargeting
    safe_site_offset: tuple = (30.0, 0.0)  # m, (downrange, crossrange) from the current site
    retarget_altitude: float = 60.0  # m above the safe site
    handover_altitude: float = 10.0  # m
    descent_rate: float = -1.0  # m/s
    engine_count: int = 2
    min_thrust_fraction: float = 0.3
    rate_gain: float = 1.0  # 1/s, vertical-rate feedback
    step: float = 0.1  # s, integration and guidance period
    tgo_step: float = 1.0  # s, t_go grid for guided segments

    def __post_init__(self):
        off = np.atleast_1d(np.asarray(self.safe_site_offset, dtype=float))
        if off.size == 1:
            off = np.array([off[0], 0.0])
        if off.shape != (2,):
            raise ValueError("safe_site_offset is a scalar or a (downrange, crossrange) pair")
        self.safe_site_offset = tuple(float(v) for v in off)
        if not (self.intermediate_altitude > self.retarget_altitude > self.handover_altitude > 0):
            raise ValueError("altitudes must strictly decrease through the sequence")
        if min(self.first_hover, self.second_hover_max, self.step, self.tgo_step) <= 0:
            raise ValueError("durations and steps must be positive")
        if not 0 <= self.hazard_decision_time <= self.second_hover_max:
            raise ValueError("hazard decision time must lie in [0, second_hover_max]")
        if not self.descent_rate < 0:
            raise ValueError("descent_rate must be negative")

    def thrust_bounds(self, constants: MoonConstants):
        tmax = constants.max_thrust(self.engine_count)
        return self.min_thrust_fraction * tmax, tmax


@dataclass
class Segment:
    label: str
    times: np.ndarray
    states: np.ndarray
    thrust: np.ndarray
    t_go: float = math.nan
    direction: np.ndarray | None = None  # (n, 3) unit thrust direction; None means vertical

    def __post_init__(self):
        if self.direction is None:
            self.direction = np.tile([0.0, 1.0, 0.0], (len(self.times), 1))

    @property
    def thrust_vector(self) -> np.ndarray:
        return self.direction * self.thrust[:, None]

    @property
    def propellant(self) -> float:
        return float(self.states[0, 6] - self.states[-1, 6])

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])


@dataclass
class TerminalTrajectory:
    segments: list = field(default_factory=list)
    site: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def touchdown(self) -> np.ndarray:
        return self.segments[-1].states[-1]

    @property
    def total_propellant(self) -> float:
        return float(sum(s.propellant for s in self.segments))

    @property
    def lateral_error(self) -> float:
        x = self.touchdown
        return float(math.hypot(x[0] - self.site[0], x[2] - self.site[2]))

    def segment(self, label) -> Segment:
        for s in self.segments:
            if s.label == label:
                return s
        raise KeyError(label)

    def as_table(self) -> np.ndarray:
        """Columns ``t, x, y, z, vx, vy, vz, m, T`` over all segments."""
        rows = [np.column_stack([s.times, s.states, s.thrust]) for s in self.segments]
        return np.vstack(rows)

    def labels(self) -> list:
        """Segment label of every row of :meth:`as_table`."""
        return [s.label for s in self.segments for _ in range(len(s.times))]

    def thrust_vectors(self) -> np.ndarray:
        return np.vstack([s.thrust_vector for s in self.segments])


def hover_thrust(state, constants: MoonConstants, thrust_bounds=None, gain: float = 1.0,
                 rate_ref: float = 0.0) -> float:
    """Vertical thrust ``m (|g| + gain (rate_ref - w))``.

    Raises :class:`SaturationError` above the upper limit; below the lower
    limit the thrust is clamped up.
    """
    x = state.as_array() if isinstance(state, LocalState) else np.asarray(state, dtype=float)
    if not x[6] > 0:
        raise ValueError("mass must be positive")
    if thrust_bounds is None:
        tmax = constants.max_thrust(2)
        thrust_bounds = (0.0, tmax)
    g = float(np.linalg.norm(constants.gravity))
    T = x[6] * (g + gain * (rate_ref - x[4]))
    if T > thrust_bounds[1]:
        raise SaturationError(f"hover needs {T:.1f} N above the {thrust_bounds[1]:.1f} N limit")
    return float(max(T, thrust_bounds[0]))


def _rate_hold(x0, t0, duration, constants, bounds, gain, rate_ref, step, stop_altitude=None):
    """Vertical-thrust segment holding the vertical rate; optional ground stop."""
    times, states, thrust = [t0], [x0.copy()], [hover_thrust(x0, constants, bounds, gain, rate_ref)]
    x, t = x0.copy(), t0
    n = max(1, math.ceil(duration / step - 1e-9)) if duration is not None else 10**7
    for _ in range(n):
        T = hover_thrust(x, constants, bounds, gain, rate_ref)
        h = step if duration is None else min(step, t0 + duration - t)

        def f(_, y):
            return flat_eom(y, np.array([0.0, T / y[6], 0.0]), T, constants)

        xn = rk4_step(f, t, x, h)
        if stop_altitude is not None and xn[1] <= stop_altitude:
            # shorten the last step to land on the stop altitude (linear in time)
            frac = (x[1] - stop_altitude) / (x[1] - xn[1])
            xn = rk4_step(f, t, x, h * frac)
            h *= frac
            xn[1] = stop_altitude
            t += h
            times.append(t)
            states.append(xn)
            thrust.append(T)
            break
        x, t = xn, t + h
        times.append(t)
        states.append(x.copy())
        thrust.append(T)
    return np.array(times), np.array(states), np.array(thrust)


def _guided(x0, rf, vf, constants, bounds, cfg: TerminalSequenceConfig, t_range):
    """Fuel-optimal guided segment from ``x0`` to ``(rf, vf)`` ending at hover acceleration."""
    g = constants.gravity
    hover_acc = -g  # thrust acceleration that cancels gravity
    boundary = GuidanceBoundary(x0[:3], x0[3:6], hover_acc, rf, vf, hover_acc)
    grid = tgo_grid(t_range[0], t_range[1], cfg.tgo_step)
    mass, _ = grid_search_batch(x0[None, :], boundary, grid, constants, bounds, period=cfg.step)
    if not np.any(np.isfinite(mass[0])):
        return None
    tgo = float(grid[np.nanargmax(mass[0])])
    # replay the chosen t_go with the traced kernel
    return closed_loop_rollout(x0, boundary, tgo, constants, bounds, period=cfg.step)


def simulate_terminal_sequence(start, config: TerminalSequenceConfig | None = None,
                               constants: MoonConstants | None = None) -> TerminalTrajectory:
    """Fly the whole terminal sequence from ``start`` (local state, terrain frame)."""
    cfg = config or TerminalSequenceConfig()
    c = constants or MoonConstants()
    bounds = cfg.thrust_bounds(c)
    x = start.as_array() if isinstance(start, LocalState) else np.array(start, dtype=float)
    site = np.array([x[0] + cfg.safe_site_offset[0], 0.0, x[2] + cfg.safe_site_offset[1]])
    traj = TerminalTrajectory(site=site)
    t = 0.0

    def add(label, times, states, thrust, tgo=math.nan, direction=None):
        traj.segments.append(Segment(label, times, states, thrust, tgo, direction))
        return states[-1].copy(), float(times[-1])

    def guided(label, rf, vf, t_range):
        res = _guided(x, rf, vf, c, bounds, cfg, t_range)
        if res is None:
            raise TerminalSequenceError(f"guidance found no converging t_go for segment '{label}'", traj)
        # the first row repeats the thrust in effect when the segment starts
        th = res.thrust.copy()
        th[0] = traj.segments[-1].thrust[-1]
        acc = res.thrust_accel.copy()
        acc[0] = traj.segments[-1].direction[-1]
        direction = acc / np.linalg.norm(acc, axis=1, keepdims=True)
        return add(label, t + res.times, res.states, th, res.t_go, direction)

    try:
        x, t = add("hover", *_rate_hold(x, t, cfg.first_hover, c, bounds, cfg.rate_gain, 0.0, cfg.step))
        drop = x[1] - cfg.intermediate_altitude
        x, t = guided("descent", np.array([x[0], cfg.intermediate_altitude, x[2]]), np.zeros(3),
                      _tgo_range(drop, c))
        x, t = add("hazard_hover", *_rate_hold(x, t, cfg.hazard_decision_time, c, bounds, cfg.rate_gain,
                                               0.0, cfg.step))
        target = np.array([site[0], cfg.retarget_altitude, site[2]])
        x, t = guided("retarget", target, np.zeros(3), _tgo_range(np.linalg.norm(target - x[:3]), c))
        x, t = guided("approach", np.array([site[0], cfg.handover_altitude, site[2]]),
                      np.array([0.0, cfg.descent_rate, 0.0]),
                      _tgo_range(cfg.retarget_altitude - cfg.handover_altitude, c))
        # the guided segment may end a hair off the handover rate; the hold absorbs it
        x, t = add("constant_rate", *_rate_hold(x, t, None, c, bounds, cfg.rate_gain, cfg.descent_rate,
                                                cfg.step, stop_altitude=0.0))
    except SaturationError as exc:
        raise TerminalSequenceError(f"thrust saturation: {exc}", traj) from exc
    return traj


def _tgo_range(distance, constants):
    """Search window for a guided segment covering ``distance`` metres."""
    d = max(float(distance), 1.0)
    g = float(np.linalg.norm(constants.gravity))
    fastest = max(2.0, 2.0 * math.sqrt(d / g))
    return (math.ceil(fastest), math.ceil(fastest) + max(20.0, 6.0 * math.sqrt(d)))
