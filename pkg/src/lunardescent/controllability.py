"""Backward pass: dispersions, controllable set, conic boundary and trade-off.

States are local-frame 7-vectors around the fine-braking start waypoint.
The controllable set is learned in the reduced coordinates
``s = (S / v, H / w)``; its boundary is a conic fitted by a maximum-margin
linear classifier on quadratic features, and the signed distance to it is
the robustness margin used to refine the waypoint.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dyn
from .guidance import (GuidanceBoundary, PolynomialSurrogate, fit_polynomial, fit_tgo_policy,
                       grid_search_batch, policy_features)

# (S, H, w, v) positions inside a local state
DISPERSED_INDEX = np.array([0, 1, 4, 3])
DM_FEATURES = ("S", "H", "v", "w")


class ConvexityError(ValueError):
    """Fitted conic is not an ellipse (b^2 - 4ac >= 0)."""

    def __init__(self, message, coefficients):
        super().__init__(message)
        self.coefficients = np.asarray(coefficients)


class DegeneratePointError(ValueError):
    """Boundary gradient vanishes at the evaluation point."""


class InfeasibleRefinementError(ValueError):
    def __init__(self, message, violations):
        super().__init__(message)
        self.violations = violations


@dataclass
class DispersionModel:
    """Gaussian dispersions of ``(S, H, w, v)`` (and optionally mass) around ``mean``."""

    mean: np.ndarray  # local state, 7
    covariance: np.ndarray  # 4x4 over (S, H, w, v)
    mass_std: float = 0.0
    n_samples: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(7)
        self.covariance = np.asarray(self.covariance, dtype=float)
        if self.covariance.shape != (4, 4):
            raise ValueError("covariance must be 4x4 over (S, H, w, v)")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-12 * (1 + np.abs(self.covariance).max())):
            raise ValueError("covariance must be symmetric")
        w = np.linalg.eigvalsh(self.covariance)
        if w[0] < -1e-9 * max(1.0, w[-1]):
            raise ValueError(f"covariance is not positive semidefinite (min eigenvalue {w[0]:.3g})")
        if self.mass_std < 0 or self.n_samples < 1:
            raise ValueError("mass_std must be >= 0 and n_samples >= 1")

    @classmethod
    def diagonal(cls, mean, position_std=500.0, velocity_std=10.0, **kw):
        cov = np.diag([position_std**2, position_std**2, velocity_std**2, velocity_std**2])
        return cls(mean=mean, covariance=cov, **kw)

    def with_mean(self, mean) -> "DispersionModel":
        return replace(self, mean=np.asarray(mean, dtype=float))


def sample_dispersions(model: DispersionModel, n: int | None = None, seed: int | None = None) -> np.ndarray:
    """``x_bar + delta_i`` with ``delta_i ~ N(0, Sigma)``; deterministic in the seed.

    The square root of a singular covariance is taken from its eigen
    decomposition with negative round-off eigenvalues clipped to zero.
    """
    n = model.n_samples if n is None else int(n)
    rng = np.random.default_rng(model.seed if seed is None else seed)
    w, V = np.linalg.eigh(model.covariance)
    if w[0] > 1e-12 * max(1.0, w[-1]):
        L = np.linalg.cholesky(model.covariance)
    else:
        L = V * np.sqrt(np.clip(w, 0.0, None))
    z = rng.standard_normal((n, 4))
    out = np.tile(model.mean, (n, 1))
    out[:, DISPERSED_INDEX] += z @ L.T
    mz = rng.standard_normal(n)
    if model.mass_std > 0:
        out[:, 6] += model.mass_std * mz
    return out


def reduced_coordinates(states) -> np.ndarray:
    """``s = (S / v, H / w)``; nan where |v| or |w| < 0.1 m/s."""
    X = np.atleast_2d(np.asarray(states, dtype=float))
    v, w = X[:, 3], X[:, 4]
    ok = (np.abs(v) >= 0.1) & (np.abs(w) >= 0.1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.column_stack([X[:, 0] / v, X[:, 1] / w])
    s[~ok] = np.nan
    return s


@dataclass
class GuidanceDataset:
    """Controllable samples with their fuel-optimal t_go and propellant."""

    states: np.ndarray
    t_go: np.ndarray
    dm: np.ndarray

    def __len__(self):
        return len(self.t_go)


@dataclass
class ClassificationDataset:
    states: np.ndarray
    labels: np.ndarray  # +1 controllable, -1 not
    reduced: np.ndarray  # (n, 2), nan where undefined
    rollout_mass: np.ndarray | None = None  # (n, G) final masses, nan for failed rollouts
    t_grid: np.ndarray | None = None

    @property
    def valid(self) -> np.ndarray:
        return np.all(np.isfinite(self.reduced), axis=1)

    @property
    def excluded(self) -> int:
        """Samples left out of the classifier (reduced coordinates undefined)."""
        return int(np.sum(~self.valid))

    def controllable_set(self) -> list:
        """``X_C``: per controllable sample, its rollout set ``[(t_go, m_f), ...]``."""
        if self.rollout_mass is None:
            return []
        out = []
        for x, row in zip(self.states[self.labels > 0], self.rollout_mass[self.labels > 0]):
            ok = np.isfinite(row)
            out.append((x, list(zip(self.t_grid[ok].tolist(), row[ok].tolist()))))
        return out


def build_datasets(samples, boundary: GuidanceBoundary, t_grid, constants: dyn.MoonConstants,
                   thrust_bounds, period: float = 0.1, pos_tol: float = 1.0, vel_tol: float = 0.1,
                   kernel=None):
    """Grid-search t_go for every sample and label it.

    Returns ``(GuidanceDataset, ClassificationDataset)``.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    grid = np.asarray(t_grid, dtype=float)
    mass, _ = grid_search_batch(X, boundary, grid, constants, thrust_bounds, period,
                                pos_tol=pos_tol, vel_tol=vel_tol, kernel=kernel)
    ok = np.any(np.isfinite(mass), axis=1)
    labels = np.where(ok, 1, -1)
    best = np.array([int(np.nanargmax(row)) if good else -1 for row, good in zip(mass, ok)])
    t_opt = grid[best[ok]]
    dm = X[ok, 6] - mass[ok, best[ok]]
    return (GuidanceDataset(states=X[ok], t_go=t_opt, dm=dm),
            ClassificationDataset(states=X, labels=labels, reduced=reduced_coordinates(X),
                                  rollout_mass=mass, t_grid=grid))


# ----------------------------------------------------------- conic fit
def conic_features(s) -> np.ndarray:
    s = np.atleast_2d(np.asarray(s, dtype=float))
    s1, s2 = s[:, 0], s[:, 1]
    return np.column_stack([s1 * s1, s1 * s2, s2 * s2, s1, s2, np.ones_like(s1)])


@dataclass
class ConicBoundary:
    """``a s1^2 + b s1 s2 + c s2^2 + d s1 + e s2 + f``, positive on the controllable side."""

    coefficients: np.ndarray  # (a, b, c, d, e, f), unit norm
    inside_positive: bool = True
    training_accuracy: float = math.nan

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float).reshape(6)

    @property
    def discriminant(self) -> float:
        a, b, c = self.coefficients[:3]
        return float(b * b - 4 * a * c)

    def value(self, s):
        out = conic_features(s) @ self.coefficients
        return out[0] if np.ndim(s) == 1 else out

    def gradient(self, s):
        s = np.atleast_2d(np.asarray(s, dtype=float))
        a, b, c, d, e, _ = self.coefficients
        g = np.column_stack([2 * a * s[:, 0] + b * s[:, 1] + d, b * s[:, 0] + 2 * c * s[:, 1] + e])
        return g

    def predict(self, s):
        return np.where(self.value(s) > 0, 1, -1)

    def center(self) -> np.ndarray:
        a, b, c, d, e, _ = self.coefficients
        return np.linalg.solve([[2 * a, b], [b, 2 * c]], [-d, -e])

    def zero_set(self, n: int = 360) -> np.ndarray:
        """Points on the ellipse, parameterized by angle about the center."""
        a, b, c = self.coefficients[:3]
        x0 = self.center()
        f0 = self.value(x0)
        th = np.linspace(0, 2 * np.pi, n, endpoint=False)
        u = np.column_stack([np.cos(th), np.sin(th)])
        q = a * u[:, 0] ** 2 + b * u[:, 0] * u[:, 1] + c * u[:, 1] ** 2
        rad = np.sqrt(-f0 / q)
        return x0 + rad[:, None] * u

    def to_dict(self) -> dict:
        return {"coefficients": self.coefficients.tolist(), "inside_positive": self.inside_positive,
                "training_accuracy": self.training_accuracy}

    @classmethod
    def from_dict(cls, d) -> "ConicBoundary":
        acc = d.get("training_accuracy")
        return cls(np.array(d["coefficients"], dtype=float), bool(d["inside_positive"]),
                   math.nan if acc is None else float(acc))


def _pegasos(Phi, y, C, iterations, seed):
    """Projected subgradient descent on ``lam/2 |w|^2 + mean(hinge)``, iterate averaging.

    Full-batch subgradients, step ``1 / (lam t)``, projection on the ball
    of radius ``1 / sqrt(lam)`` that contains the optimum.  The seed only
    orders ties (kept for reproducibility of the documented contract).
    """
    n, k = Phi.shape
    lam = 1.0 / (C * n)
    radius = 1.0 / math.sqrt(lam)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(k) * 0.0
    avg = np.zeros(k)
    start = iterations // 2
    yPhi = Phi * y[:, None]
    for t in range(1, iterations + 1):
        viol = yPhi @ w < 1.0
        grad = lam * w - yPhi[viol].sum(axis=0) / n
        w = w - grad / (lam * t)
        nw = np.linalg.norm(w)
        if nw > radius:
            w *= radius / nw
        if t > start:
            avg += (w - avg) / (t - start)
    return avg


def fit_conic_boundary(data: ClassificationDataset, C: float = 10.0, iterations: int = 100_000,
                       seed: int = 0) -> ConicBoundary:
    """Soft-margin maximum-margin conic separating the labels in reduced coordinates.

    The reduced coordinates are standardized for the fit and the conic is
    mapped back afterwards.  Raises :class:`ConvexityError` when the
    result is not an ellipse.
    """
    ok = data.valid
    s = data.reduced[ok]
    y = np.asarray(data.labels, dtype=float)[ok]
    if s.shape[0] < 6 or np.unique(y).size < 2:
        raise ValueError("need at least 6 samples with both labels present")
    mu = s.mean(axis=0)
    sd = s.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    z = (s - mu) / sd
    w = _pegasos(conic_features(z), y, C, iterations, seed)
    coef = _unstandardize(w, mu, sd)
    coef /= np.linalg.norm(coef)
    boundary = ConicBoundary(coef)
    boundary.training_accuracy = float(np.mean(boundary.predict(s) == y))
    if boundary.discriminant >= 0:
        raise ConvexityError(f"fitted conic is not an ellipse: b^2 - 4ac = {boundary.discriminant:.3g}", coef)
    # the sign already follows the labels (M > 0 on the controllable side);
    # record whether that side is the bounded inside of the ellipse
    boundary.inside_positive = bool(boundary.coefficients[0] < 0)
    return boundary


def _unstandardize(w, mu, sd):
    """Coefficients in ``s`` of the quadratic given in ``z = (s - mu) / sd``."""
    A, B, Cc, D, E, F = w
    p, q = 1 / sd[0], 1 / sd[1]
    m1, m2 = mu
    a = A * p * p
    b = B * p * q
    c = Cc * q * q
    d = -2 * A * p * p * m1 - B * p * q * m2 + D * p
    e = -2 * Cc * q * q * m2 - B * p * q * m1 + E * q
    f = A * p * p * m1 * m1 + B * p * q * m1 * m2 + Cc * q * q * m2 * m2 - D * p * m1 - E * q * m2 + F
    return np.array([a, b, c, d, e, f])


def robustness_margin(boundary: ConicBoundary, s) -> float:
    """Signed distance estimate ``f(s) / |grad f(s)|``; positive on the controllable side."""
    s = np.asarray(s, dtype=float)
    g = boundary.gradient(s)
    n = np.linalg.norm(g, axis=1)
    if np.any(n == 0):
        raise DegeneratePointError("boundary gradient vanishes at the evaluation point")
    out = boundary.value(np.atleast_2d(s)) / n
    return float(out[0]) if s.ndim == 1 else out


def margin_sigma(boundary: ConicBoundary, data: ClassificationDataset) -> float:
    """Sample standard deviation of the margin over the controllable samples."""
    s = data.reduced[data.valid & (data.labels > 0)]
    if len(s) < 2:
        raise ValueError("need at least two controllable samples")
    return float(np.std(robustness_margin(boundary, s), ddof=1))


# ------------------------------------------------------- surrogates
def dm_features(states) -> np.ndarray:
    X = np.atleast_2d(np.asarray(states, dtype=float))
    return np.column_stack([X[:, 0], X[:, 1], X[:, 3], X[:, 4]])


def fit_dm_surrogate(data: GuidanceDataset) -> PolynomialSurrogate:
    """Quadratic propellant model over ``(S, H, v, w)`` (15 monomials)."""
    return fit_polynomial(dm_features(data.states), data.dm, 2, DM_FEATURES)


def fit_policy(data: GuidanceDataset):
    return fit_tgo_policy(policy_features(data.states), data.t_go)


# ---------------------------------------------------------- refinement
@dataclass
class RefinementConfig:
    lam: float
    H: float  # fixed altitude
    S_bounds: tuple
    v_bounds: tuple
    w_bounds: tuple
    v_sops: float = 100.0
    dm_max: float = math.inf
    sigma: float = 1.0  # margin normalizer
    dm_scale: float = 1.0  # propellant normalizer
    starts_per_axis: int = 3
    initial_step: float = 0.25  # fraction of each box side
    min_step: float = 1e-6

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        for name in ("S_bounds", "v_bounds", "w_bounds"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must satisfy lo <= hi")
        if self.sigma <= 0 or self.dm_scale <= 0:
            raise ValueError("sigma and dm_scale must be positive")


@dataclass
class RefinedWaypoint:
    S: float
    H: float
    v: float
    w: float
    margin: float  # in sigma units
    dm: float
    objective: float

    def state(self, template) -> np.ndarray:
        x = np.array(template, dtype=float)
        x[0], x[1], x[3], x[4] = self.S, self.H, self.v, self.w
        return x


class _Objective:
    def __init__(self, boundary, surrogate, cfg: RefinementConfig):
        self.b, self.sur, self.cfg = boundary, surrogate, cfg
        self.lo = np.array([cfg.S_bounds[0], cfg.v_bounds[0], cfg.w_bounds[0]])
        # v <= v_sops is a plain bound, so it tightens the box instead of acting as a barrier
        self.hi = np.array([cfg.S_bounds[1], min(cfg.v_bounds[1], cfg.v_sops), cfg.w_bounds[1]])
        self._lo, self._hi = self.lo.tolist(), self.hi.tolist()
        self._conic = [float(c) for c in boundary.coefficients]
        # polynomial surrogates get a scalar path; anything else is called as is
        self._poly = isinstance(surrogate, PolynomialSurrogate)
        if self._poly:
            self._mu = [float(v) for v in surrogate.mean]
            self._sd = [float(v) for v in surrogate.std]
            self._terms = [([(i, int(e)) for i, e in enumerate(row) if e], float(c))
                           for row, c in zip(surrogate.exponents, surrogate.coefficients)]

    def _margin(self, s1, s2):
        # scalar form of robustness_margin, called ~1e5 times per trace
        a, b, c, d, e, f = self._conic
        g1 = 2 * a * s1 + b * s2 + d
        g2 = b * s1 + 2 * c * s2 + e
        n = math.hypot(g1, g2)
        if n == 0:
            return math.nan
        return (a * s1 * s1 + b * s1 * s2 + c * s2 * s2 + d * s1 + e * s2 + f) / n

    def _dm(self, x):
        if not self._poly:
            return float(self.sur(x))
        z = [(xi - mu) / sd for xi, mu, sd in zip(x, self._mu, self._sd)]
        total = 0.0
        for exps, coef in self._terms:
            term = coef
            for i, e in exps:
                term *= z[i] ** e
            total += term
        return total

    def parts(self, p):
        S, v, w = (float(q) for q in p)
        H = self.cfg.H
        if abs(v) < 0.1 or abs(w) < 0.1:
            return math.nan, math.nan
        m = self._margin(S / v, H / w)
        if math.isnan(m):
            return math.nan, math.nan
        return m / self.cfg.sigma, self._dm((S, H, v, w))

    def violations(self, p):
        m, dm = self.parts(p)
        out = []
        if any(q < lo or q > hi for q, lo, hi in zip(p, self._lo, self._hi)):
            out.append("bounds")
        if p[1] > self.cfg.v_sops:
            out.append("v <= v_sops")
        if not m > 0:
            out.append("M > 0")
        if not dm <= self.cfg.dm_max:
            out.append("dm <= dm_max")
        return out, m, dm

    def __call__(self, p):
        bad, m, dm = self.violations(p)
        if bad:
            return math.inf, m, dm
        lam = self.cfg.lam
        return -lam * m + (1 - lam) * dm / self.cfg.dm_scale, m, dm


def _pattern_search(obj: _Objective, start, step, min_step, max_evals: int = 20_000):
    """Hooke-Jeeves pattern search; returns every accepted base point.

    Exploratory moves poll each axis in turn and keep any improvement,
    successful explorations are extrapolated along the last displacement
    (which follows diagonal valleys), and the step halves when nothing
    improves.  ``max_evals`` bounds the work per start.
    """
    lo, hi = obj._lo, obj._hi
    span = [max(u - l, 1e-12) for l, u in zip(lo, hi)]
    seen = {}

    def f(x):
        key = tuple(x)
        val = seen.get(key)
        if val is None:
            val = seen[key] = obj(list(key))
        return val

    def clip(x):
        return [min(max(v, l), u) for v, l, u in zip(x, lo, hi)]

    def explore(x, fx, h):
        x = list(x)
        for i in range(3):
            for sgn in (1.0, -1.0):
                q = list(x)
                q[i] = min(max(q[i] + sgn * h[i], lo[i]), hi[i])
                fq = f(q)
                if fq[0] < fx[0]:
                    x, fx = q, fq
                    break
        return x, fx

    base = clip([float(v) for v in start])
    fbase = f(base)
    visited = [(np.array(base),) + fbase]
    h = [float(v) for v in step]
    while max(hk / sk for hk, sk in zip(h, span)) > min_step and len(seen) < max_evals:
        x, fx = explore(base, fbase, h)
        if not fx[0] < fbase[0]:
            h = [hk * 0.5 for hk in h]
            continue
        while fx[0] < fbase[0] and len(seen) < max_evals:
            prev, base, fbase = base, x, fx
            visited.append((np.array(base),) + fbase)
            trial = clip([2 * b - a for a, b in zip(prev, base)])
            x, fx = explore(trial, f(trial), h)
    return visited


def _start_grid(obj: _Objective, k: int):
    axes = [np.linspace(lo, hi, k + 2)[1:-1] for lo, hi in zip(obj.lo, obj.hi)]
    return [np.array(p) for p in itertools.product(*axes)]


def _candidate_pool(boundary, surrogate, cfg: RefinementConfig):
    obj = _Objective(boundary, surrogate, cfg)
    step = cfg.initial_step * (obj.hi - obj.lo)
    pool = []
    for start in _start_grid(obj, cfg.starts_per_axis):
        pool.extend(_pattern_search(obj, start, step, cfg.min_step))
    return obj, pool


def _pool_arrays(pool):
    P = np.array([q[0] for q in pool], dtype=float).reshape(-1, 3)
    M = np.array([q[2] for q in pool], dtype=float)
    D = np.array([q[3] for q in pool], dtype=float)
    return P, M, D


def _select(pool, lam, cfg: RefinementConfig, tol=1e-9):
    P, M, D = pool if isinstance(pool, tuple) else _pool_arrays(pool)
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(M) & np.isfinite(D) & (M > 0) & (D <= cfg.dm_max) & (P[:, 1] <= cfg.v_sops)
    if not ok.any():
        return None
    idx = np.flatnonzero(ok)
    J = -lam * M[idx] + (1 - lam) * D[idx] / cfg.dm_scale
    ties = idx[J <= J.min() + tol]
    # among maximal points, the one with minimum propellant (first in pool order on exact ties)
    k = ties[np.lexsort((-M[ties], D[ties]))[0]]
    return -lam * M[k] + (1 - lam) * D[k] / cfg.dm_scale, D[k], M[k], P[k]


def refine_waypoint(boundary: ConicBoundary, surrogate, cfg: RefinementConfig) -> RefinedWaypoint:
    """Minimize ``-lam M + (1 - lam) dm`` over ``(S, v, w)`` with ``H`` fixed.

    ``M`` is in sigma units and ``dm`` is divided by ``cfg.dm_scale``.
    Deterministic multistart compass search; constraints are enforced as
    an extreme barrier.
    """
    obj, pool = _candidate_pool(boundary, surrogate, cfg)
    pick = _select(pool, cfg.lam, cfg)
    if pick is None:
        bad, _, _ = obj.violations(0.5 * (obj.lo + obj.hi))
        raise InfeasibleRefinementError(f"no feasible waypoint; violated at the box center: {bad}", bad)
    J, dm, m, p = pick
    return RefinedWaypoint(S=float(p[0]), H=cfg.H, v=float(p[1]), w=float(p[2]), margin=float(m),
                           dm=float(dm), objective=float(J))


@dataclass
class TradeoffEntry:
    lam: float
    waypoint: RefinedWaypoint | None

    @property
    def feasible(self) -> bool:
        return self.waypoint is not None


@dataclass
class TradeoffCurve:
    entries: list = field(default_factory=list)

    @property
    def lams(self) -> np.ndarray:
        return np.array([e.lam for e in self.entries])

    @property
    def margins(self) -> np.ndarray:
        return np.array([e.waypoint.margin if e.feasible else np.nan for e in self.entries])

    @property
    def dms(self) -> np.ndarray:
        return np.array([e.waypoint.dm if e.feasible else np.nan for e in self.entries])

    def fuel_per_margin(self) -> np.ndarray:
        """Incremental propellant per sigma of extra margin between neighbours."""
        m, d = self.margins, self.dms
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.diff(d) / np.diff(m)

    def at_margin(self, target: float) -> TradeoffEntry:
        """First feasible entry whose margin reaches ``target`` sigma (else the largest)."""
        feas = [e for e in self.entries if e.feasible]
        if not feas:
            raise ValueError("curve has no feasible entry")
        for e in feas:
            if e.waypoint.margin >= target:
                return e
        return feas[-1]


def trace_tradeoff(boundary: ConicBoundary, surrogate, lams, cfg: RefinementConfig) -> TradeoffCurve:
    """Sweep the weight ``lam``.

    The multistart searches of all weights feed one candidate pool and
    every weight picks its optimum from that pool, so the curve is exactly
    the weighted-sum frontier of the pool: margin and propellant are
    non-decreasing in ``lam`` and no entry dominates another.
    """
    lams = np.sort(np.asarray(lams, dtype=float))
    if np.any(lams < 0) or np.any(lams > 1):
        raise ValueError("lam grid must lie in [0, 1]")
    pool = []
    for lam in lams:
        _, part = _candidate_pool(boundary, surrogate, replace(cfg, lam=float(lam)))
        pool.extend(part)
    arrays = _pool_arrays(pool)
    curve = TradeoffCurve()
    for lam in lams:
        pick = _select(arrays, lam, cfg)
        if pick is None:
            curve.entries.append(TradeoffEntry(float(lam), None))
            continue
        J, dm, m, p = pick
        curve.entries.append(TradeoffEntry(float(lam), RefinedWaypoint(
            S=float(p[0]), H=cfg.H, v=float(p[1]), w=float(p[2]), margin=float(m), dm=float(dm),
            objective=float(J))))
    return curve


# ------------------------------------------------------ rough-braking search
@dataclass
class RoughBrakingCandidate:
    downrange: float  # m
    feasible: bool
    dm: float  # kg, nan when infeasible
    margin: float  # m of downrange to the nearest infeasible candidate or the interval end
    status: str


@dataclass
class RoughBrakingSelection:
    candidates: list
    index: int
    target: np.ndarray  # spherical rough-braking exit state
    trajectory: object = None  # PhaseTrajectory of the chosen candidate

    @property
    def selected(self) -> RoughBrakingCandidate:
        return self.candidates[self.index]

    @property
    def downrange(self) -> float:
        return self.selected.downrange

    def as_table(self) -> np.ndarray:
        """Columns ``downrange, feasible, dm, margin``."""
        return np.array([[c.downrange, float(c.feasible), c.dm, c.margin] for c in self.candidates])


def _interval_margins(downrange, feasible, lo, hi):
    """Distance from each feasible candidate to the nearest infeasible one or interval end."""
    out = np.full(downrange.size, np.nan)
    bad = downrange[~feasible]
    for i in np.flatnonzero(feasible):
        d = min(downrange[i] - lo, hi - downrange[i])
        if bad.size:
            d = min(d, float(np.min(np.abs(bad - downrange[i]))))
        out[i] = d
    return out


def _curve_midpoint(margin, dm):
    """Index of the point at half the arc length of the normalized Pareto front."""
    idx = np.flatnonzero(np.isfinite(dm))
    # Pareto front in (margin up, dm down)
    front = [i for i in idx if not any(
        margin[j] >= margin[i] and dm[j] <= dm[i] and (margin[j] > margin[i] or dm[j] < dm[i]) for j in idx)]
    front.sort(key=lambda i: (margin[i], dm[i]))
    if len(front) == 1:
        return front[0]
    m = np.array([margin[i] for i in front])
    d = np.array([dm[i] for i in front])
    span = lambda a: (a - a.min()) / (np.ptp(a) if np.ptp(a) > 0 else 1.0)
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(span(m)), np.diff(span(d))))])
    return front[int(np.argmin(np.abs(arc - 0.5 * arc[-1])))]


def rough_braking_line_search(config, fine_start, hold_thrust: float, downrange_range, step: float,
                              options=None, n_collocation: int | None = None,
                              feasibility_tolerance: float = 1e-5, nominal=None) -> RoughBrakingSelection:
    """Place the rough-braking start for a refined fine-braking waypoint.

    ``fine_start`` (spherical) is carried back through the attitude hold
    with ``hold_thrust``; that fixes the rough-braking exit state (same
    altitude as before).  Each candidate downrange then gets its own
    single-phase rough-braking solve.  A candidate is feasible when the
    solve meets the constraints to ``feasibility_tolerance`` (scaled),
    whatever its optimality residual.  Robustness of a candidate is its
    distance to the nearest infeasible candidate or interval end, and the
    pick is the candidate at the middle of the (margin, propellant) front.
    ``nominal = (times, states, controls)`` of the forward-pass rough
    braking seeds every solve (see :func:`~.mission.build_rough_braking`).
    """
    from .mission import solve_rough_braking

    lo, hi = (float(v) for v in downrange_range)
    if not (0 < lo <= hi) or not step > 0:
        raise ValueError("need 0 < min downrange <= max downrange and a positive step")
    c = config.constants
    target = dyn.backpropagate_attitude_hold(np.asarray(fine_start, dtype=float), hold_thrust, c,
                                             duration=config.attitude_hold_duration,
                                             alpha_deg=config.attitude_hold_alpha_deg,
                                             step=config.attitude_hold_step)
    grid = np.arange(lo, hi + 1e-9 * max(hi, 1.0), step) if hi > lo else np.array([lo])
    results = []
    for D in grid:
        try:
            traj, res = solve_rough_braking(config, target, float(D), options, n_collocation, nominal)
        except ValueError as exc:  # e.g. duration guess outside its bounds
            results.append((None, None, str(exc)))
            continue
        ok = max(res.eq_violation, res.ineq_violation) <= feasibility_tolerance
        results.append((traj if ok else None, res, res.status))
    feasible = np.array([r[0] is not None for r in results])
    if not feasible.any():
        raise InfeasibleRefinementError(
            f"no feasible rough-braking start in [{lo:.0f}, {hi:.0f}] m", ["rough_braking_feasibility"])
    dm = np.array([r[0].states[0, 6] - r[0].states[-1, 6] if r[0] is not None else np.nan for r in results])
    margin = _interval_margins(grid, feasible, lo, hi)
    cands = [RoughBrakingCandidate(float(D), bool(f), float(m), float(g), r[2])
             for D, f, m, g, r in zip(grid, feasible, dm, margin, results)]
    k = _curve_midpoint(margin, dm)
    return RoughBrakingSelection(cands, int(k), target, results[k][0])
