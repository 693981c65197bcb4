"""Cubic net-acceleration guidance, closed-loop rollouts and t_go search.

The net acceleration ``abar = a + g`` is a cubic in elapsed time on each
axis,

    abar(t) = C0 + C1 t + C2 t^2 + C3 t^3,   0 <= t <= t_go,

fixed by the boundary accelerations and by the terminal position and
velocity.  In closed loop the coefficients are recomputed every guidance
cycle from the current state and the remaining time to go.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import _kernels
from .dynamics import LocalState, MoonConstants


class SingularSystemError(ValueError):
    """The guidance boundary system has no unique solution (t_go <= 0)."""


class RankDeficiencyError(ValueError):
    """Least-squares design matrix is rank deficient."""

    def __init__(self, message, terms):
        super().__init__(message)
        self.terms = list(terms)


@dataclass
class GuidanceBoundary:
    """Initial and terminal position, velocity and thrust acceleration (local frame)."""

    r0: np.ndarray
    v0: np.ndarray
    a0: np.ndarray
    rf: np.ndarray
    vf: np.ndarray
    af: np.ndarray

    def __post_init__(self):
        for name in ("r0", "v0", "a0", "rf", "vf", "af"):
            vec = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if vec.shape != (3,) or not np.all(np.isfinite(vec)):
                raise ValueError(f"{name} must be a finite 3-vector")
            setattr(self, name, vec)

    @classmethod
    def from_waypoint(cls, start, end) -> "GuidanceBoundary":
        """Boundary from the start of one waypoint and the end of another."""
        return cls(start.r0, start.v0, start.a0, end.rf, end.vf, end.af)

    def target(self, gravity) -> np.ndarray:
        """``[r_f, v_f, abar_f]`` in the layout used by the rollout kernels."""
        return np.concatenate([self.rf, self.vf, self.af + np.asarray(gravity, dtype=float)])


@dataclass
class PolyCoeffs:
    """Net-acceleration cubic, ``coeffs[k]`` multiplies ``t**k`` (SI units)."""

    coeffs: np.ndarray  # (4, 3)
    t_go: float

    @property
    def C0(self):
        return self.coeffs[0]

    @property
    def C1(self):
        return self.coeffs[1]

    @property
    def C2(self):
        return self.coeffs[2]

    @property
    def C3(self):
        return self.coeffs[3]

    def acceleration(self, t):
        """Net acceleration at elapsed time(s) ``t``."""
        t = np.asarray(t, dtype=float)[..., None]
        c = self.coeffs
        return c[0] + t * (c[1] + t * (c[2] + t * c[3]))

    def integrate(self, r0, v0, t):
        """Position and velocity after ``t`` seconds of exact double integration."""
        t = np.asarray(t, dtype=float)[..., None]
        c = self.coeffs
        v = v0 + t * (c[0] + t * (c[1] / 2 + t * (c[2] / 3 + t * c[3] / 4)))
        r = r0 + v0 * t + t * t * (c[0] / 2 + t * (c[1] / 6 + t * (c[2] / 12 + t * c[3] / 20)))
        return r, v


def solve_coeffs(boundary: GuidanceBoundary, t_go: float, g) -> PolyCoeffs:
    """Solve the four boundary rows per axis for the cubic coefficients.

    Rows: ``abar(0) = abar0``, ``abar(t_go) = abar_f``, the velocity change
    ``v_f - v0`` and the position change ``r_f - r0 - v0 t_go``, with
    ``abar = a + g``.  The system is solved in closed form after the
    substitution ``c_k = C_k t_go**k``, which keeps it well conditioned for
    any horizon.

    Raises
    ------
    SingularSystemError
        If ``t_go <= 0``.
    """
    t_go = float(t_go)
    if not t_go > 0:
        raise SingularSystemError(f"t_go must be positive, got {t_go}")
    if t_go < 1e-3:
        warnings.warn(f"t_go = {t_go:g} s makes the guidance system nearly singular", RuntimeWarning)
    g = np.asarray(g, dtype=float)
    c = _kernels.normalized_coefficients(boundary.r0, boundary.v0, boundary.a0 + g, boundary.rf,
                                         boundary.vf, boundary.af + g, t_go)
    scale = t_go ** -np.arange(4.0)
    return PolyCoeffs(coeffs=(c * scale).T.copy(), t_go=t_go)


@dataclass
class RolloutResult:
    times: np.ndarray
    states: np.ndarray  # (n + 1, 7) local states after each cycle
    thrust: np.ndarray  # thrust at the end of each cycle, N (nan at t = 0)
    t_go: float
    status: str
    saturated_cycles: int
    position_error: float
    velocity_error: float
    thrust_accel: np.ndarray | None = None  # (n + 1, 3) applied thrust acceleration, nan at t = 0

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def final_mass(self) -> float:
        return float(self.states[-1, 6])

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def as_table(self) -> np.ndarray:
        """Columns ``t, x, y, z, vx, vy, vz, m, T``."""
        return np.column_stack([self.times, self.states, self.thrust])


def _state_array(state) -> np.ndarray:
    if isinstance(state, LocalState):
        return state.as_array()
    x = np.asarray(state, dtype=float)
    if x.shape[-1] != 7:
        raise ValueError("local state must have 7 entries")
    return x


def closed_loop_rollout(state, boundary: GuidanceBoundary, t_go: float, constants: MoonConstants,
                        thrust_bounds, period: float = 0.1, pos_tol: float = 1.0,
                        vel_tol: float = 0.1) -> RolloutResult:
    """Fly the guidance law from ``state`` for ``t_go`` seconds.

    The initial position and velocity come from ``state``; ``boundary``
    supplies the first-cycle acceleration ``a0`` and the terminal triple.
    Saturation counts against convergence only through the terminal
    error.  A mass-floor breach or ground impact ends the rollout as
    diverged.
    """
    if not t_go > 0:
        raise SingularSystemError(f"t_go must be positive, got {t_go}")
    x = _state_array(state)
    g = constants.gravity
    final, status, sat, hist = _kernels._rollout_py.rollout_batch(
        x[None], boundary.target(g)[None], (boundary.a0 + g)[None], [t_go], g,
        thrust_bounds[0], thrust_bounds[1], constants.exhaust_velocity, constants.dry_mass,
        period=period, pos_tol=pos_tol, vel_tol=vel_tol, trace=True)
    times, states, thrust, accel = hist
    return RolloutResult(
        times=times, states=states, thrust=thrust, t_go=float(t_go), thrust_accel=accel,
        status=_kernels.STATUS_NAMES[int(status[0])], saturated_cycles=int(sat[0]),
        position_error=float(np.linalg.norm(final[0, :3] - boundary.rf)),
        velocity_error=float(np.linalg.norm(final[0, 3:6] - boundary.vf)))


@dataclass
class TgoSearch:
    """Rollout set over a t_go grid: ``final_mass`` is nan where a rollout failed."""

    t_grid: np.ndarray
    final_mass: np.ndarray
    status: np.ndarray
    initial_mass: float

    @property
    def feasible(self) -> np.ndarray:
        return np.isfinite(self.final_mass)

    @property
    def controllable(self) -> bool:
        return bool(np.any(self.feasible))

    @property
    def label(self) -> int:
        return 1 if self.controllable else -1

    @property
    def best_index(self) -> int | None:
        if not self.controllable:
            return None
        return int(np.nanargmax(self.final_mass))

    @property
    def t_go_opt(self) -> float:
        i = self.best_index
        return math.nan if i is None else float(self.t_grid[i])

    @property
    def dm_opt(self) -> float:
        i = self.best_index
        return math.nan if i is None else float(self.initial_mass - self.final_mass[i])

    def rollout_set(self) -> list[tuple[float, float]]:
        """The pairs ``(t_go, m_f)`` of converged rollouts."""
        ok = self.feasible
        return list(zip(self.t_grid[ok].tolist(), self.final_mass[ok].tolist()))


def tgo_grid(t_min: float, t_max: float, step: float) -> np.ndarray:
    if not (t_min < t_max and step > 0 and t_min > 0):
        raise ValueError("need 0 < t_min < t_max and step > 0")
    n = int(math.floor((t_max - t_min) / step + 1e-9))
    return t_min + step * np.arange(n + 1)


def grid_search_batch(states, boundary: GuidanceBoundary, t_grid, constants: MoonConstants,
                      thrust_bounds, period: float = 0.1, pos_tol: float = 1.0, vel_tol: float = 0.1,
                      kernel=None):
    """Roll out every state against every t_go; returns ``(final_mass, status)`` of shape (S, G).

    All rollouts start with the boundary's ``a0``.  ``kernel`` defaults to
    the selected backend (compiled when available).
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    grid = np.asarray(t_grid, dtype=float)
    S, G = X.shape[0], grid.size
    g = constants.gravity
    run = kernel or _kernels.rollout_batch
    xs = np.repeat(X, G, axis=0)
    tg = np.tile(grid, S)
    tgt = np.broadcast_to(boundary.target(g), (S * G, 9))
    ab = np.broadcast_to(boundary.a0 + g, (S * G, 3))
    final, status, _, _ = run(xs, tgt, ab, tg, g, thrust_bounds[0], thrust_bounds[1],
                              constants.exhaust_velocity, constants.dry_mass, period=period,
                              pos_tol=pos_tol, vel_tol=vel_tol)
    status = np.asarray(status).reshape(S, G)
    mass = np.where(status == _kernels.CONVERGED, final[:, 6].reshape(S, G), np.nan)
    return mass, status


def grid_search_tgo(state, boundary: GuidanceBoundary, t_range=(150.0, 500.0), step: float = 1.0,
                    constants: MoonConstants | None = None, thrust_bounds=None, period: float = 0.1,
                    **tol) -> TgoSearch:
    """Exhaustive t_go search; the fuel-optimal t_go maximizes the final mass."""
    constants = constants or MoonConstants()
    if thrust_bounds is None:
        tmax = constants.max_thrust(4)
        thrust_bounds = (0.3 * tmax, tmax)
    x = _state_array(state)
    grid = tgo_grid(t_range[0], t_range[1], step)
    mass, status = grid_search_batch(x[None], boundary, grid, constants, thrust_bounds, period, **tol)
    return TgoSearch(t_grid=grid, final_mass=mass[0], status=status[0], initial_mass=float(x[6]))


# ------------------------------------------------------------- surrogates
def monomial_exponents(n_vars: int, degree: int) -> np.ndarray:
    """All exponent tuples of total degree <= ``degree``, constant first."""
    terms = []
    for d in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_vars), d):
            e = np.zeros(n_vars, dtype=int)
            for i in combo:
                e[i] += 1
            terms.append(e)
    return np.array(terms)


def _term_name(exp, names):
    parts = [n if k == 1 else f"{n}^{k}" for n, k in zip(names, exp) if k]
    return "*".join(parts) or "1"


@dataclass
class PolynomialSurrogate:
    """Full multivariate polynomial on standardized features, fit by least squares."""

    names: tuple
    degree: int
    mean: np.ndarray
    std: np.ndarray
    coefficients: np.ndarray
    rms: float = 0.0
    exponents: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.exponents is None:
            self.exponents = monomial_exponents(len(self.names), self.degree)

    @property
    def terms(self) -> list[str]:
        return [_term_name(e, self.names) for e in self.exponents]

    def features(self, X) -> np.ndarray:
        Z = (np.atleast_2d(np.asarray(X, dtype=float)) - self.mean) / self.std
        return np.prod(Z[:, None, :] ** self.exponents[None], axis=2)

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        out = self.features(X) @ self.coefficients
        return out[0] if X.ndim == 1 else out

    def to_dict(self) -> dict:
        return {"names": list(self.names), "degree": self.degree, "mean": self.mean.tolist(),
                "std": self.std.tolist(), "coefficients": self.coefficients.tolist(), "rms": self.rms}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["names"]), int(d["degree"]), np.array(d["mean"]), np.array(d["std"]),
                   np.array(d["coefficients"]), float(d["rms"]))


def fit_polynomial(X, y, degree: int, names, cls=PolynomialSurrogate):
    """Least-squares polynomial fit with zero-mean/unit-variance features.

    Raises
    ------
    RankDeficiencyError
        Naming the monomials that pivoted QR finds linearly dependent.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    exps = monomial_exponents(X.shape[1], degree)
    if X.shape[0] < len(exps):
        raise ValueError(f"need at least {len(exps)} samples for a degree-{degree} fit, got {X.shape[0]}")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    model = cls(tuple(names), degree, mean, std, np.zeros(len(exps)), exponents=exps)
    A = model.features(X)
    _, R, piv = linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > diag[0] * max(A.shape) * np.finfo(float).eps * 1e3)) if diag.size else 0
    if rank < len(exps):
        bad = [model.terms[i] for i in piv[rank:]]
        raise RankDeficiencyError(f"design matrix rank {rank} < {len(exps)}; dependent terms: {bad}", bad)
    coef, *_ = linalg.lstsq(A, y)
    model.coefficients = coef
    model.rms = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return model


class TgoPolicy(PolynomialSurrogate):
    """Cubic t_go policy over ``(S, H, w, v)`` (35 monomials)."""


POLICY_FEATURES = ("S", "H", "w", "v")


def policy_features(states) -> np.ndarray:
    """``(S, H, w, v)`` from local states: downrange, altitude, vertical and horizontal speed."""
    X = np.atleast_2d(np.asarray(states, dtype=float))
    return np.column_stack([X[:, 0], X[:, 1], X[:, 4], X[:, 3]])


def fit_tgo_policy(features, t_go) -> TgoPolicy:
    """Fit the 35-term cubic policy to ``(S, H, w, v) -> t_go*`` samples."""
    return fit_polynomial(features, t_go, 3, POLICY_FEATURES, cls=TgoPolicy)
