"""Lander equations of motion, frame conversion and RK4 propagation.

Two models are provided:

* a rotating spherical-moon model in moon-fixed spherical coordinates,
  state ``[r, theta, phi, w, u, v, m]`` with ``theta`` longitude, ``phi``
  latitude, ``w`` radial, ``u`` across (east) and ``v`` tangential
  (north-track, downrange) velocity;
* a flat, non-rotating model in a local terrain frame, state
  ``[x, y, z, vx, vy, vz, m]`` with axes ``x`` downrange, ``y`` up and
  ``z`` crossrange.

Thrust direction is given by pitch ``alpha`` from the local vertical and
out-of-plane yaw ``beta``.  The in-plane horizontal component points
against the downrange direction (retro-thrust), so ``alpha = 50 deg`` with
``beta = 0`` brakes the tangential velocity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

SPHERICAL_STATE = ("r", "theta", "phi", "w", "u", "v", "m")
LOCAL_STATE = ("x", "y", "z", "vx", "vy", "vz", "m")


class SingularCoordinateError(ValueError):
    """Latitude at a pole, where the spherical equations are singular."""


class MassDepletionError(ValueError):
    """Mass fell to or below the dry-mass floor."""


class PropagationError(RuntimeError):
    """Propagation aborted; carries the trajectory computed so far."""

    def __init__(self, message, times, states):
        super().__init__(message)
        self.times = np.asarray(times)
        self.states = np.asarray(states)


@dataclass(frozen=True)
class MoonConstants:
    mu: float = 4.9028e12  # m^3/s^2
    radius: float = 1_737_400.0  # m
    omega: float = 2.6617e-6  # rad/s
    g0: float = 9.81  # m/s^2
    isp: float = 320.0  # s
    engine_max_thrust: float = 800.0  # N per engine
    underperformance_factor: float = 0.95
    g_local: tuple = (0.0, -1.62, 0.0)  # m/s^2, flat-frame [downrange, up, crossrange]
    dry_mass: float = 400.0  # kg

    def __post_init__(self):
        for name in ("mu", "radius", "g0", "isp", "engine_max_thrust", "dry_mass"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.omega < 0:
            raise ValueError("omega must be non-negative")
        if not 0 < self.underperformance_factor <= 1:
            raise ValueError("underperformance_factor must lie in (0, 1]")
        g = tuple(float(c) for c in self.g_local)
        if len(g) != 3 or not g[1] < 0:
            raise ValueError("g_local must be a 3-vector with negative up-component")
        object.__setattr__(self, "g_local", g)

    @property
    def exhaust_velocity(self) -> float:
        return self.isp * self.g0

    @property
    def gravity(self) -> np.ndarray:
        return np.array(self.g_local)

    def max_thrust(self, engine_count: int) -> float:
        """Derated maximum thrust for ``engine_count`` engines."""
        return engine_count * self.engine_max_thrust * self.underperformance_factor


@dataclass(frozen=True)
class SphericalState:
    r: float
    theta: float
    phi: float
    w: float
    u: float
    v: float
    m: float

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.theta, self.phi, self.w, self.u, self.v, self.m])

    @classmethod
    def from_array(cls, x) -> "SphericalState":
        return cls(*(float(c) for c in x))


@dataclass(frozen=True)
class BodyThrust:
    T: float
    alpha: float
    beta: float = 0.0

    def __post_init__(self):
        if self.T < 0:
            raise ValueError("thrust magnitude must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.T, self.alpha, self.beta])


@dataclass(frozen=True)
class LocalState:
    position: np.ndarray  # [downrange, up, crossrange], m
    velocity: np.ndarray  # m/s
    mass: float  # kg

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity, [self.mass]])

    @classmethod
    def from_array(cls, x) -> "LocalState":
        x = np.asarray(x, dtype=float)
        return cls(position=x[:3].copy(), velocity=x[3:6].copy(), mass=float(x[6]))


def thrust_components(T, alpha, beta):
    """Split a body thrust into (up, downrange, crossrange) components."""
    s = np.sin(alpha)
    return T * np.cos(alpha), -T * s * np.cos(beta), T * s * np.sin(beta)


def thrust_vector(T, alpha, beta):
    """Thrust vector in the local frame ``[downrange, up, crossrange]``."""
    up, down, cross = thrust_components(T, alpha, beta)
    return np.stack(np.broadcast_arrays(down, up, cross), axis=-1)


def body_thrust_from_vector(force):
    """Inverse of :func:`thrust_vector`: ``[Fx, Fy, Fz] -> [T, alpha, beta]``.

    ``beta`` lies in (-pi/2, pi/2]; the sign of ``alpha`` carries the
    in-plane direction (positive = retro).  A purely vertical vector has
    ``alpha = beta = 0``.
    """
    f = np.asarray(force, dtype=float)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    T = np.sqrt(fx**2 + fy**2 + fz**2)
    retro = -fx
    sign = np.where(retro < 0, -1.0, 1.0)
    alpha = np.arctan2(sign * np.hypot(retro, fz), fy)
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where((retro == 0) & (fz == 0), 0.0, np.arctan2(sign * fz, sign * retro))
    return np.stack([T, alpha, beta], axis=-1)


def spherical_eom(state, control, constants: MoonConstants):
    """Time derivative of the spherical moon-fixed state.

    Accepts single states (shape (7,)) or stacks (shape (k, 7)) with
    matching controls ``[T, alpha, beta]``.
    """
    x = np.asarray(state, dtype=float)
    c = np.asarray(control, dtype=float)
    r, phi, w, u, v, m = x[..., 0], x[..., 2], x[..., 3], x[..., 4], x[..., 5], x[..., 6]
    T, alpha, beta = c[..., 0], c[..., 1], c[..., 2]
    cphi = np.cos(phi)
    if np.any(np.abs(cphi) < 1e-12):
        raise SingularCoordinateError("latitude at +-90 deg")
    sphi = np.sin(phi)
    tphi = sphi / cphi
    om = constants.omega
    up, down, cross = thrust_components(T, alpha, beta)

    out = np.empty(np.broadcast(r, T).shape + (7,))
    out[..., 0] = w
    out[..., 1] = u / (r * cphi)
    out[..., 2] = v / r
    out[..., 3] = (up / m - constants.mu / r**2 + (u**2 + v**2) / r
                   + 2 * u * om * cphi + r * om**2 * cphi**2)
    out[..., 4] = (cross / m + (-u * w + u * v * tphi) / r
                   - 2 * w * om * cphi + 2 * v * om * sphi)
    out[..., 5] = (down / m + (-v * w - u**2 * tphi) / r
                   - 2 * u * om * sphi - r * om**2 * sphi * cphi)
    out[..., 6] = -T / constants.exhaust_velocity
    return out


def flat_eom(state, accel, thrust, constants: MoonConstants, check_mass: bool = True):
    """Flat-moon derivative: r' = v, v' = g + a, m' = -T / (Isp g0)."""
    x = np.asarray(state, dtype=float)
    a = np.asarray(accel, dtype=float)
    if check_mass and np.any(x[..., 6] <= constants.dry_mass):
        raise MassDepletionError(f"mass at or below dry floor {constants.dry_mass} kg")
    out = np.empty(np.broadcast(x[..., :3], a).shape[:-1] + (7,))
    out[..., 0:3] = x[..., 3:6]
    out[..., 3:6] = constants.gravity + a
    out[..., 6] = -np.asarray(thrust) / constants.exhaust_velocity
    return out


def flat_eom_vector(state, force, constants: MoonConstants, check_mass: bool = True):
    """Flat-moon derivative with the thrust given as a force vector, N."""
    x = np.asarray(state, dtype=float)
    f = np.asarray(force, dtype=float)
    accel = f / x[..., 6:7]
    return flat_eom(x, accel, np.linalg.norm(f, axis=-1), constants, check_mass)


def flat_eom_body(state, control, constants: MoonConstants, check_mass: bool = True):
    """Flat-moon derivative with the thrust given as ``[T, alpha, beta]``."""
    x = np.asarray(state, dtype=float)
    c = np.asarray(control, dtype=float)
    T = c[..., 0]
    up, down, cross = thrust_components(T, c[..., 1], c[..., 2])
    m = x[..., 6]
    accel = np.stack([down / m, up / m, cross / m], axis=-1)
    return flat_eom(x, accel, T, constants, check_mass)


@dataclass
class PropagationResult:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray | None = field(default=None)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def rk4_step(f: Callable, t: float, x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = f(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def propagate(eom: Callable, state, control_profile: Callable, duration: float,
              step: float = 0.1, t0: float = 0.0) -> PropagationResult:
    """Classic fixed-step RK4 with dense output at every step.

    ``eom(t, x, u)`` returns the state derivative and ``control_profile(t, x)``
    the control applied at that instant.  The last step is shortened to land
    exactly on ``t0 + duration``; a negative ``step`` is not allowed, but
    ``duration`` may be integrated backwards with :func:`propagate_backward`.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    if not step > 0:
        raise ValueError("step must be positive")
    n = max(1, math.ceil(duration / step - 1e-9))
    x = np.array(state, dtype=float)
    times = [t0]
    states = [x.copy()]

    def f(t, y):
        return eom(t, y, control_profile(t, y))

    t = t0
    for k in range(n):
        h = min(step, t0 + duration - t) if k == n - 1 else step
        try:
            x = rk4_step(f, t, x, h)
        except (ValueError, FloatingPointError, ZeroDivisionError) as exc:
            raise PropagationError(str(exc), times, states) from exc
        if not np.all(np.isfinite(x)):
            raise PropagationError("non-finite state", times, states)
        t = t0 + duration if k == n - 1 else t + h
        times.append(t)
        states.append(x.copy())
    return PropagationResult(np.array(times), np.array(states))


def propagate_backward(eom: Callable, state, control_profile: Callable, duration: float,
                       step: float = 0.1) -> PropagationResult:
    """Integrate ``duration`` seconds into the past (inverse-time RK4)."""

    def reversed_eom(t, x, u):
        return -eom(-t, x, u)

    def reversed_control(t, x):
        return control_profile(-t, x)

    res = propagate(reversed_eom, state, reversed_control, duration, step)
    return PropagationResult(-res.times, res.states)


def attitude_hold_control(thrust, alpha_deg: float = 50.0):
    """``[T, alpha, 0]``; an array of thrusts gives one row per entry."""
    T = np.asarray(thrust, dtype=float)
    return np.stack(np.broadcast_arrays(T, math.radians(alpha_deg), 0.0), axis=-1)


def propagate_attitude_hold(state, thrust: float, constants: MoonConstants,
                            duration: float = 10.0, alpha_deg: float = 50.0,
                            step: float = 0.5, dense: bool = False):
    """Open-loop attitude-hold segment in spherical dynamics.

    Constant thrust magnitude at ``alpha_deg`` from the vertical with zero
    yaw.  Returns the final state (array) or, with ``dense=True``, the full
    :class:`PropagationResult`.  A stack of states ``(k, 7)`` with ``k``
    thrusts is propagated in one pass.
    """
    control = attitude_hold_control(thrust, alpha_deg)
    res = propagate(lambda t, x, u: spherical_eom(x, u, constants), state,
                    lambda t, x: control, duration, step)
    return res if dense else res.final


def backpropagate_attitude_hold(state, thrust: float, constants: MoonConstants,
                                duration: float = 10.0, alpha_deg: float = 50.0,
                                step: float = 0.5) -> np.ndarray:
    """State before the attitude hold that reaches ``state`` at its end."""
    control = attitude_hold_control(thrust, alpha_deg)
    res = propagate_backward(lambda t, x, u: spherical_eom(x, u, constants), state,
                             lambda t, x: control, duration, step)
    return res.final


def spherical_to_local(state, reference, constants: MoonConstants,
                       terrain_elevation: float = 0.0) -> np.ndarray:
    """Express a spherical state in the flat terrain frame anchored at ``reference``.

    The origin is the ground projection of ``reference``.  Position is
    ``[downrange arc, altitude above terrain, crossrange arc]``, velocity is
    ``[v, w, u]`` and the mass is carried through.  Returns a 7-array.
    """
    x = np.asarray(state, dtype=float)
    ref = np.asarray(reference, dtype=float)
    R = constants.radius
    downrange = R * (x[..., 2] - ref[..., 2])
    cross = R * np.cos(ref[..., 2]) * (x[..., 1] - ref[..., 1])
    alt = x[..., 0] - R - terrain_elevation
    return np.stack([downrange, alt, cross, x[..., 5], x[..., 3], x[..., 4], x[..., 6]], axis=-1)


def local_to_spherical(local, reference, constants: MoonConstants,
                       terrain_elevation: float = 0.0) -> np.ndarray:
    """Inverse of :func:`spherical_to_local` for the same ``reference``."""
    x = np.asarray(local, dtype=float)
    ref = np.asarray(reference, dtype=float)
    R = constants.radius
    lat = ref[..., 2] + x[..., 0] / R
    lon = ref[..., 1] + x[..., 2] / (R * np.cos(ref[..., 2]))
    r = x[..., 1] + R + terrain_elevation
    return np.stack([r, lon, lat, x[..., 4], x[..., 5], x[..., 3], x[..., 6]], axis=-1)


def specific_energy(state, constants: MoonConstants) -> float:
    """Specific orbital energy of a spherical state (non-rotating frame only)."""
    x = np.asarray(state, dtype=float)
    speed2 = x[..., 3] ** 2 + x[..., 4] ** 2 + x[..., 5] ** 2
    return 0.5 * speed2 - constants.mu / x[..., 0]


def angular_momentum(state) -> float:
    x = np.asarray(state, dtype=float)
    return x[..., 0] * np.sqrt(x[..., 4] ** 2 + x[..., 5] ** 2)
