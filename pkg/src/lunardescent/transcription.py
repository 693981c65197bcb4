"""Multiphase optimal-control problems and their Radau transcription.

A :class:`MultiphaseProblem` is a list of :class:`PhaseSpec` plus
sequential :class:`LinkageSpec` entries.  :func:`transcribe` turns it into
an :class:`NlpProblem` over the stacked decision vector

    z = [z^(1), ..., z^(P)],   z^(p) = [X_1..X_{N+1} (node-major), U_1..U_N, t0, tf]

with every entry affinely scaled to O(1).  Equality rows ``g(z) = 0`` hold
the collocation defects and the pinned boundary/linkage rows; inequality
rows ``h(z) <= 0`` hold path constraints at all N+1 points, two-sided
boundary/linkage rows and the phase duration limits.

Jacobians are finite differences arranged around the problem structure:
the dynamics at a node only see that node, so one perturbation per state or
control component covers every node at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .lgr import LGRGrid, lgr_grid

FD_EPS = np.sqrt(np.finfo(float).eps)


def _as_bound(value, size, fill):
    if value is None:
        return np.full(size, fill, dtype=float)
    arr = np.broadcast_to(np.asarray(value, dtype=float), (size,)).copy()
    return arr


@dataclass
class PathConstraint:
    """``lower <= fn(X, U, t, params) <= upper`` at every discretization point.

    ``fn`` receives stacked states (k, nx), controls (k, nu) and times (k,)
    and returns an array of shape (k, nc).
    """

    fn: Callable
    lower: Sequence[float]
    upper: Sequence[float]
    scale: float | Sequence[float] = 1.0


@dataclass
class BoundaryConstraint:
    """``lower <= fn(x0, u0, t0, xf, uf, tf, params) <= upper`` for one phase.

    Rows where lower equals upper become equality constraints.
    """

    fn: Callable
    lower: Sequence[float]
    upper: Sequence[float]
    scale: float | Sequence[float] = 1.0


@dataclass
class PhaseGuess:
    t0: float
    tf: float
    state_initial: Sequence[float]
    state_final: Sequence[float]
    control: Sequence[float] | None = None
    state_fn: Callable | None = None  # t -> (nx,), overrides the linear guess
    control_fn: Callable | None = None  # t -> (nu,)


@dataclass
class PhaseSpec:
    state_dim: int
    control_dim: int
    dynamics: Callable  # (X, U, t, params) -> Xdot, vectorized over rows
    n_collocation: int
    lagrange_cost: Callable | None = None  # (X, U, t, params) -> (k,)
    mayer_cost: Callable | None = None  # (x0, t0, xf, tf, params) -> float
    path_constraints: list = field(default_factory=list)
    boundary_constraints: list = field(default_factory=list)
    state_lower: Sequence[float] | None = None
    state_upper: Sequence[float] | None = None
    control_lower: Sequence[float] | None = None
    control_upper: Sequence[float] | None = None
    t0_bounds: tuple = (-np.inf, np.inf)
    tf_bounds: tuple = (-np.inf, np.inf)
    duration_bounds: tuple = (0.0, np.inf)
    state_scale: Sequence[float] | None = None
    state_offset: Sequence[float] | None = None
    control_scale: Sequence[float] | None = None
    control_offset: Sequence[float] | None = None
    time_scale: float = 1.0
    params: dict = field(default_factory=dict)
    guess: PhaseGuess | None = None
    name: str = ""

    def __post_init__(self):
        if self.state_dim < 1 or self.control_dim < 0:
            raise ValueError("phase needs at least one state")
        if self.n_collocation < 1:
            raise ValueError("n_collocation must be >= 1")
        nx, nu = self.state_dim, self.control_dim
        self.state_lower = _as_bound(self.state_lower, nx, -np.inf)
        self.state_upper = _as_bound(self.state_upper, nx, np.inf)
        self.control_lower = _as_bound(self.control_lower, nu, -np.inf)
        self.control_upper = _as_bound(self.control_upper, nu, np.inf)
        self.state_scale = _as_bound(self.state_scale, nx, 1.0)
        self.state_offset = _as_bound(self.state_offset, nx, 0.0)
        self.control_scale = _as_bound(self.control_scale, nu, 1.0)
        self.control_offset = _as_bound(self.control_offset, nu, 0.0)
        for lo, hi, what in (
            (self.state_lower, self.state_upper, "state"),
            (self.control_lower, self.control_upper, "control"),
            (np.array(self.t0_bounds[:1]), np.array(self.t0_bounds[1:]), "t0"),
            (np.array(self.tf_bounds[:1]), np.array(self.tf_bounds[1:]), "tf"),
            (np.array(self.duration_bounds[:1]), np.array(self.duration_bounds[1:]), "duration"),
        ):
            if np.any(lo > hi):
                raise ValueError(f"inconsistent {what} bounds")
        if np.any(self.state_scale <= 0) or np.any(self.control_scale <= 0) or self.time_scale <= 0:
            raise ValueError("scales must be positive")
        for c in list(self.path_constraints) + list(self.boundary_constraints):
            if np.any(np.asarray(c.lower, dtype=float) > np.asarray(c.upper, dtype=float)):
                raise ValueError("constraint lower bound exceeds upper bound")


@dataclass
class LinkageSpec:
    """``lower <= fn(xf_l, uf_l, tf_l, x0_r, u0_r, t0_r) <= upper`` between phases."""

    left: int
    right: int
    fn: Callable
    lower: Sequence[float]
    upper: Sequence[float]
    scale: float | Sequence[float] = 1.0
    vectorized: bool = False  # fn accepts a leading batch axis on every argument

    def __post_init__(self):
        if self.right <= self.left:
            raise ValueError("linkages must be sequential (right phase after left phase)")
        if np.any(np.asarray(self.lower, dtype=float) > np.asarray(self.upper, dtype=float)):
            raise ValueError("linkage lower bound exceeds upper bound")


@dataclass
class MultiphaseProblem:
    phases: list
    linkages: list = field(default_factory=list)

    def __post_init__(self):
        if not self.phases:
            raise ValueError("problem needs at least one phase")
        for link in self.linkages:
            if not (0 <= link.left < len(self.phases) and 0 <= link.right < len(self.phases)):
                raise ValueError("linkage refers to a missing phase")


@dataclass
class PhaseValues:
    """Physical values of one phase unpacked from the decision vector."""

    states: np.ndarray  # (N+1, nx)
    controls: np.ndarray  # (N, nu)
    t0: float
    tf: float


@dataclass(frozen=True)
class PhaseSlices:
    start: int
    n_nodes: int
    nx: int
    nu: int

    @property
    def x(self) -> slice:
        return slice(self.start, self.start + self.n_nodes * self.nx)

    @property
    def u(self) -> slice:
        s = self.start + self.n_nodes * self.nx
        return slice(s, s + (self.n_nodes - 1) * self.nu)

    @property
    def t0(self) -> int:
        return self.start + self.n_nodes * self.nx + (self.n_nodes - 1) * self.nu

    @property
    def tf(self) -> int:
        return self.t0 + 1

    @property
    def stop(self) -> int:
        return self.tf + 1

    def state_index(self, node: int, comp: int) -> int:
        return self.start + node * self.nx + comp

    def control_index(self, node: int, comp: int) -> int:
        return self.u.start + node * self.nu + comp


class DecisionLayout:
    """Placement of each phase's states, controls and times in ``z``."""

    def __init__(self, problem: MultiphaseProblem):
        self.problem = problem
        self.phases: list[PhaseSlices] = []
        start = 0
        for ph in problem.phases:
            if ph.state_dim < 1:
                raise ValueError("zero-dimension phase")
            sl = PhaseSlices(start, ph.n_collocation + 1, ph.state_dim, ph.control_dim)
            self.phases.append(sl)
            start = sl.stop
        self.size = start

    def unpack_scaled(self, z, p):
        sl = self.phases[p]
        X = z[sl.x].reshape(sl.n_nodes, sl.nx)
        U = z[sl.u].reshape(sl.n_nodes - 1, sl.nu)
        return X, U, z[sl.t0], z[sl.tf]

    def unpack(self, z) -> list[PhaseValues]:
        z = np.asarray(z, dtype=float)
        out = []
        for p, ph in enumerate(self.problem.phases):
            X, U, t0, tf = self.unpack_scaled(z, p)
            out.append(PhaseValues(
                states=ph.state_offset + ph.state_scale * X,
                controls=ph.control_offset + ph.control_scale * U,
                t0=float(t0 * ph.time_scale),
                tf=float(tf * ph.time_scale),
            ))
        return out

    def pack(self, values: Sequence[PhaseValues]) -> np.ndarray:
        z = np.empty(self.size)
        for p, (ph, v) in enumerate(zip(self.problem.phases, values)):
            sl = self.phases[p]
            z[sl.x] = ((np.asarray(v.states) - ph.state_offset) / ph.state_scale).ravel()
            z[sl.u] = ((np.asarray(v.controls) - ph.control_offset) / ph.control_scale).ravel()
            z[sl.t0] = v.t0 / ph.time_scale
            z[sl.tf] = v.tf / ph.time_scale
        return z


def build_layout(problem: MultiphaseProblem) -> DecisionLayout:
    return DecisionLayout(problem)


@dataclass
class NlpProblem:
    """``min f(z)`` subject to ``g(z) = 0``, ``h(z) <= 0``, ``lower <= z <= upper``.

    The derivative callbacks are optional; the solver falls back to finite
    differences.  ``evaluate(z, derivatives)`` may supply everything at once
    as ``(f, grad, g, Jg, h, Jh)`` (derivative entries ``None`` when not
    requested).
    """

    n: int
    objective: Callable
    eq_constraints: Callable
    ineq_constraints: Callable
    lower: np.ndarray
    upper: np.ndarray
    x0: np.ndarray
    m_eq: int
    m_ineq: int
    objective_gradient: Callable | None = None
    eq_jacobian: Callable | None = None
    ineq_jacobian: Callable | None = None
    evaluate: Callable | None = None
    transcription: object | None = None
    hessian_elements: list | None = None


@dataclass
class HessianElement:
    """A partially separable piece of the Lagrangian.

    The constraint rows ``eq_rows``/``ineq_rows`` depend nonlinearly only on
    the variables ``vars``; ``objective_gradient(z)``, when present, returns
    the gradient of this element's share of the objective over ``vars``.
    Rows not listed in any element must be linear.
    """

    vars: np.ndarray
    eq_rows: np.ndarray
    ineq_rows: np.ndarray
    objective_gradient: Callable | None = None


def _rows_from_bounds(lower, upper, scale):
    lower = np.asarray(lower, dtype=float).ravel()
    upper = np.asarray(upper, dtype=float).ravel()
    scale = np.broadcast_to(np.asarray(scale, dtype=float), lower.shape).copy()
    eq = np.flatnonzero(lower == upper)
    ub = np.flatnonzero((lower != upper) & np.isfinite(upper))
    lb = np.flatnonzero((lower != upper) & np.isfinite(lower))
    return eq, ub, lb, lower, upper, scale


def _fd_columns(fun, args, vectorized=False):
    """Central-difference Jacobian of ``fun`` w.r.t. the flat vector ``args``.

    With ``vectorized`` all perturbed argument vectors go to ``fun`` as one
    ``(2n, n)`` stack.
    """
    args = np.asarray(args, dtype=float)
    if vectorized:
        h = FD_EPS * (1.0 + np.abs(args))
        steps = np.diag(h)
        out = np.asarray(fun(np.vstack([args + steps, args - steps])), dtype=float)
        n = args.size
        return ((out[:n] - out[n:]) / h[:, None]).T * 0.5
    cols = []
    for i in range(args.size):
        h = FD_EPS * (1.0 + abs(args[i]))
        ap = args.copy()
        am = args.copy()
        ap[i] += h
        am[i] -= h
        cols.append((np.asarray(fun(ap), dtype=float) - np.asarray(fun(am), dtype=float)) / (2 * h))
    return np.stack(cols, axis=-1)


class Transcription:
    """Radau collocation of a :class:`MultiphaseProblem`."""

    def __init__(self, problem: MultiphaseProblem):
        self.problem = problem
        self.layout = build_layout(problem)
        self.grids: list[LGRGrid] = [lgr_grid(ph.n_collocation) for ph in problem.phases]
        self._plan_rows()

    # ------------------------------------------------------------------ layout
    def _plan_rows(self):
        self.eq_blocks = []  # (kind, key, rows-in-block selector info)
        self.ineq_blocks = []
        n_eq = 0
        n_in = 0
        for p, ph in enumerate(self.problem.phases):
            n = ph.n_collocation * ph.state_dim
            self.eq_blocks.append(("defect", p, None, slice(n_eq, n_eq + n)))
            n_eq += n
        for p, ph in enumerate(self.problem.phases):
            for ci, con in enumerate(ph.boundary_constraints):
                eq, ub, lb, lo, hi, sc = _rows_from_bounds(con.lower, con.upper, con.scale)
                info = (eq, ub, lb, lo, hi, sc)
                if eq.size:
                    self.eq_blocks.append(("boundary", (p, ci), info, slice(n_eq, n_eq + eq.size)))
                    n_eq += eq.size
                k = ub.size + lb.size
                if k:
                    self.ineq_blocks.append(("boundary", (p, ci), info, slice(n_in, n_in + k)))
                    n_in += k
        for li, link in enumerate(self.problem.linkages):
            eq, ub, lb, lo, hi, sc = _rows_from_bounds(link.lower, link.upper, link.scale)
            info = (eq, ub, lb, lo, hi, sc)
            if eq.size:
                self.eq_blocks.append(("linkage", li, info, slice(n_eq, n_eq + eq.size)))
                n_eq += eq.size
            k = ub.size + lb.size
            if k:
                self.ineq_blocks.append(("linkage", li, info, slice(n_in, n_in + k)))
                n_in += k
        for p, ph in enumerate(self.problem.phases):
            npts = ph.n_collocation + 1
            for ci, con in enumerate(ph.path_constraints):
                lo = np.tile(np.atleast_1d(np.asarray(con.lower, dtype=float)), npts)
                hi = np.tile(np.atleast_1d(np.asarray(con.upper, dtype=float)), npts)
                sc = np.tile(np.broadcast_to(np.atleast_1d(np.asarray(con.scale, dtype=float)),
                                             np.atleast_1d(con.lower).shape), npts)
                eq, ub, lb, lo, hi, sc = _rows_from_bounds(lo, hi, sc)
                info = (eq, ub, lb, lo, hi, sc)
                if eq.size:
                    self.eq_blocks.append(("path", (p, ci), info, slice(n_eq, n_eq + eq.size)))
                    n_eq += eq.size
                k = ub.size + lb.size
                if k:
                    self.ineq_blocks.append(("path", (p, ci), info, slice(n_in, n_in + k)))
                    n_in += k
        for p, ph in enumerate(self.problem.phases):
            dmin, dmax = ph.duration_bounds
            k = 1 + int(np.isfinite(dmax))
            self.ineq_blocks.append(("time", p, (dmin, dmax), slice(n_in, n_in + k)))
            n_in += k
        self.m_eq = n_eq
        self.m_ineq = n_in

    # -------------------------------------------------------------- bounds/guess
    def variable_bounds(self):
        lo = np.full(self.layout.size, -np.inf)
        hi = np.full(self.layout.size, np.inf)
        for p, ph in enumerate(self.problem.phases):
            sl = self.layout.phases[p]
            n = sl.n_nodes
            lo[sl.x] = np.tile((ph.state_lower - ph.state_offset) / ph.state_scale, n)
            hi[sl.x] = np.tile((ph.state_upper - ph.state_offset) / ph.state_scale, n)
            lo[sl.u] = np.tile((ph.control_lower - ph.control_offset) / ph.control_scale, n - 1)
            hi[sl.u] = np.tile((ph.control_upper - ph.control_offset) / ph.control_scale, n - 1)
            lo[sl.t0], hi[sl.t0] = np.asarray(ph.t0_bounds, dtype=float) / ph.time_scale
            lo[sl.tf], hi[sl.tf] = np.asarray(ph.tf_bounds, dtype=float) / ph.time_scale
        return lo, hi

    def initial_guess(self) -> np.ndarray:
        values = []
        for p, ph in enumerate(self.problem.phases):
            grid = self.grids[p]
            g = ph.guess
            if g is None:
                raise ValueError(f"phase {p} has no initial guess")
            t = 0.5 * (g.tf - g.t0) * grid.nodes + 0.5 * (g.tf + g.t0)
            if g.state_fn is not None:
                X = np.array([g.state_fn(tk) for tk in t], dtype=float)
            else:
                frac = (grid.nodes[:, None] + 1.0) / 2.0
                x0 = np.asarray(g.state_initial, dtype=float)
                xf = np.asarray(g.state_final, dtype=float)
                X = x0 + frac * (xf - x0)
            if g.control_fn is not None:
                U = np.array([g.control_fn(tk) for tk in t[:-1]], dtype=float).reshape(-1, ph.control_dim)
            else:
                if g.control is not None:
                    u = np.asarray(g.control, dtype=float)
                else:
                    lo, hi = ph.control_lower, ph.control_upper
                    u = np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0))
                    both = np.isfinite(lo) & np.isfinite(hi)
                    u[both] = 0.5 * (lo[both] + hi[both])
                U = np.tile(u, (ph.n_collocation, 1))
            values.append(PhaseValues(X, U, g.t0, g.tf))
        z = self.layout.pack(values)
        lo, hi = self.variable_bounds()
        return np.clip(z, lo, hi)

    # -------------------------------------------------------------- phase pieces
    def _phys(self, p, X, U, t0, tf):
        ph = self.problem.phases[p]
        return (ph.state_offset + ph.state_scale * X,
                ph.control_offset + ph.control_scale * U,
                t0 * ph.time_scale, tf * ph.time_scale)

    def _dyn_scaled(self, p, Xs, Us, t):
        """Scaled dynamics at nodes: f(X, U, t) / state_scale."""
        ph = self.problem.phases[p]
        X = ph.state_offset + ph.state_scale * Xs
        U = ph.control_offset + ph.control_scale * Us
        return np.asarray(ph.dynamics(X, U, t, ph.params), dtype=float) / ph.state_scale

    def phase_defects(self, z, p):
        ph = self.problem.phases[p]
        grid = self.grids[p]
        Xs, Us, t0s, tfs = self.layout.unpack_scaled(z, p)
        t0, tf = t0s * ph.time_scale, tfs * ph.time_scale
        tk = 0.5 * (tf - t0) * grid.nodes[:-1] + 0.5 * (tf + t0)
        F = self._dyn_scaled(p, Xs[:-1], Us, tk)
        return grid.diff_matrix @ Xs - 0.5 * (tf - t0) * F

    def _defect_jacobian(self, z, p):
        ph = self.problem.phases[p]
        grid = self.grids[p]
        sl = self.layout.phases[p]
        N, nx, nu = ph.n_collocation, ph.state_dim, ph.control_dim
        Xs, Us, t0s, tfs = self.layout.unpack_scaled(z, p)
        t0, tf = t0s * ph.time_scale, tfs * ph.time_scale
        half = 0.5 * (tf - t0)
        tk = half * grid.nodes[:-1] + 0.5 * (tf + t0)
        Xc = Xs[:-1].copy()
        dFdX = np.empty((N, nx, nx))
        for j in range(nx):
            h = FD_EPS * (1.0 + np.abs(Xc[:, j]))
            xp = Xc.copy()
            xm = Xc.copy()
            xp[:, j] += h
            xm[:, j] -= h
            dFdX[:, :, j] = (self._dyn_scaled(p, xp, Us, tk) - self._dyn_scaled(p, xm, Us, tk)) / (2 * h)[:, None]
        dFdU = np.empty((N, nx, nu))
        for j in range(nu):
            h = FD_EPS * (1.0 + np.abs(Us[:, j]))
            up = Us.copy()
            um = Us.copy()
            up[:, j] += h
            um[:, j] -= h
            dFdU[:, :, j] = (self._dyn_scaled(p, Xc, up, tk) - self._dyn_scaled(p, Xc, um, tk)) / (2 * h)[:, None]
        jac = np.zeros((N * nx, self.layout.size))
        jx = np.kron(grid.diff_matrix, np.eye(nx))
        for k in range(N):
            jx[k * nx:(k + 1) * nx, k * nx:(k + 1) * nx] -= half * dFdX[k]
        jac[:, sl.x] = jx
        ju = np.zeros((N * nx, N * nu))
        for k in range(N):
            ju[k * nx:(k + 1) * nx, k * nu:(k + 1) * nu] = -half * dFdU[k]
        jac[:, sl.u] = ju
        for idx in (sl.t0, sl.tf):
            h = FD_EPS * (1.0 + abs(z[idx]))
            zp = z.copy()
            zm = z.copy()
            zp[idx] += h
            zm[idx] -= h
            jac[:, idx] = (self.phase_defects(zp, p) - self.phase_defects(zm, p)).ravel() / (2 * h)
        return jac

    def _endpoint_args(self, z, p):
        """Scaled (x0, u0, t0, xf, uf, tf) of phase p, uf from the control interpolant."""
        Xs, Us, t0s, tfs = self.layout.unpack_scaled(z, p)
        uf = self.grids[p].control_extrapolation() @ Us if Us.size else np.zeros(0)
        return Xs[0], Us[0], t0s, Xs[-1], uf, tfs

    def _endpoint_physical(self, p, x0, u0, t0, xf, uf, tf):
        ph = self.problem.phases[p]
        return (ph.state_offset + ph.state_scale * x0, ph.control_offset + ph.control_scale * u0,
                t0 * ph.time_scale, ph.state_offset + ph.state_scale * xf,
                ph.control_offset + ph.control_scale * uf, tf * ph.time_scale)

    def _endpoint_columns(self, p, start_part: bool, end_part: bool):
        """Map from a scaled endpoint argument vector to decision-vector columns.

        Returns a list of (index array or weight matrix) per argument entry.
        """
        sl = self.layout.phases[p]
        nx, nu, N = sl.nx, sl.nu, sl.n_nodes - 1
        w = self.grids[p].control_extrapolation()
        cols = []
        if start_part:
            cols += [("i", sl.state_index(0, j)) for j in range(nx)]
            cols += [("i", sl.control_index(0, j)) for j in range(nu)]
            cols += [("i", sl.t0)]
        if end_part:
            cols += [("i", sl.state_index(N, j)) for j in range(nx)]
            cols += [("w", np.array([sl.control_index(k, j) for k in range(N)]), w) for j in range(nu)]
            cols += [("i", sl.tf)]
        return cols

    @staticmethod
    def _scatter(jac_rows, local, cols):
        for c, entry in enumerate(cols):
            if entry[0] == "i":
                jac_rows[:, entry[1]] += local[:, c]
            else:
                jac_rows[:, entry[1]] += local[:, c][:, None] * entry[2][None, :]

    def _boundary_value(self, p, ci, args):
        ph = self.problem.phases[p]
        nx, nu = ph.state_dim, ph.control_dim
        x0, u0, t0 = args[:nx], args[nx:nx + nu], args[nx + nu]
        o = nx + nu + 1
        xf, uf, tf = args[o:o + nx], args[o + nx:o + nx + nu], args[o + nx + nu]
        phys = self._endpoint_physical(p, x0, u0, t0, xf, uf, tf)
        con = ph.boundary_constraints[ci]
        return np.atleast_1d(np.asarray(con.fn(*phys, ph.params), dtype=float))

    def _boundary_args(self, z, p):
        x0, u0, t0, xf, uf, tf = self._endpoint_args(z, p)
        return np.concatenate([x0, u0, [t0], xf, uf, [tf]])

    def _linkage_value(self, li, args):
        link = self.problem.linkages[li]
        pl, pr = self.problem.phases[link.left], self.problem.phases[link.right]
        nxl, nul, nxr, nur = pl.state_dim, pl.control_dim, pr.state_dim, pr.control_dim
        xf = pl.state_offset + pl.state_scale * args[..., :nxl]
        uf = pl.control_offset + pl.control_scale * args[..., nxl:nxl + nul]
        tf = args[..., nxl + nul] * pl.time_scale
        o = nxl + nul + 1
        x0 = pr.state_offset + pr.state_scale * args[..., o:o + nxr]
        u0 = pr.control_offset + pr.control_scale * args[..., o + nxr:o + nxr + nur]
        t0 = args[..., o + nxr + nur] * pr.time_scale
        out = np.asarray(link.fn(xf, uf, tf, x0, u0, t0), dtype=float)
        return out if args.ndim > 1 else np.atleast_1d(out)

    def _linkage_args(self, z, li):
        link = self.problem.linkages[li]
        _, _, _, xf, uf, tf = self._endpoint_args(z, link.left)
        x0, u0, t0, _, _, _ = self._endpoint_args(z, link.right)
        return np.concatenate([xf, uf, [tf], x0, u0, [t0]])

    def _linkage_columns(self, li):
        link = self.problem.linkages[li]
        return self._endpoint_columns(link.left, False, True) + self._endpoint_columns(link.right, True, False)

    def _path_points(self, z, p):
        ph = self.problem.phases[p]
        grid = self.grids[p]
        Xs, Us, t0s, tfs = self.layout.unpack_scaled(z, p)
        Ufull = np.vstack([Us, grid.control_extrapolation() @ Us])
        return Xs, Ufull, t0s, tfs

    def _path_value_scaled(self, p, ci, Xs, Ufull, t0s, tfs):
        ph = self.problem.phases[p]
        grid = self.grids[p]
        X = ph.state_offset + ph.state_scale * Xs
        U = ph.control_offset + ph.control_scale * Ufull
        t0, tf = t0s * ph.time_scale, tfs * ph.time_scale
        t = 0.5 * (tf - t0) * grid.nodes + 0.5 * (tf + t0)
        out = np.asarray(ph.path_constraints[ci].fn(X, U, t, ph.params), dtype=float)
        return out.reshape(X.shape[0], -1)

    # --------------------------------------------------------------- row blocks
    @staticmethod
    def _select(values, info, kind):
        eq, ub, lb, lo, hi, sc = info
        v = values.ravel()
        if kind == "eq":
            return (v[eq] - lo[eq]) / sc[eq]
        return np.concatenate([(v[ub] - hi[ub]) / sc[ub], (lo[lb] - v[lb]) / sc[lb]])

    @staticmethod
    def _select_jac(jac, info, kind):
        eq, ub, lb, lo, hi, sc = info
        if kind == "eq":
            return jac[eq] / sc[eq][:, None]
        return np.vstack([jac[ub] / sc[ub][:, None], -jac[lb] / sc[lb][:, None]])

    def _block_value(self, z, block, kind):
        typ, key, info, _ = block
        if typ == "defect":
            return self.phase_defects(z, key).ravel()
        if typ == "boundary":
            p, ci = key
            return self._select(self._boundary_value(p, ci, self._boundary_args(z, p)), info, kind)
        if typ == "linkage":
            return self._select(self._linkage_value(key, self._linkage_args(z, key)), info, kind)
        if typ == "path":
            p, ci = key
            vals = self._path_value_scaled(p, ci, *self._path_points(z, p))
            return self._select(vals, info, kind)
        if typ == "time":
            ph = self.problem.phases[key]
            sl = self.layout.phases[key]
            dmin, dmax = info
            dur = (z[sl.tf] - z[sl.t0]) * ph.time_scale
            rows = [(dmin - dur) / ph.time_scale]
            if np.isfinite(dmax):
                rows.append((dur - dmax) / ph.time_scale)
            return np.array(rows)
        raise AssertionError(typ)

    def _block_jac(self, z, block, kind):
        typ, key, info, rows = block
        nrow = rows.stop - rows.start
        if typ == "defect":
            return self._defect_jacobian(z, key)
        out = np.zeros((nrow, self.layout.size))
        if typ == "boundary":
            p, ci = key
            args = self._boundary_args(z, p)
            local = _fd_columns(lambda a: self._boundary_value(p, ci, a), args)
            full = np.zeros((local.shape[0], self.layout.size))
            self._scatter(full, local, self._endpoint_columns(p, True, True))
            return self._select_jac(full, info, kind)
        if typ == "linkage":
            args = self._linkage_args(z, key)
            local = _fd_columns(lambda a: self._linkage_value(key, a), args,
                                vectorized=self.problem.linkages[key].vectorized)
            full = np.zeros((local.shape[0], self.layout.size))
            self._scatter(full, local, self._linkage_columns(key))
            return self._select_jac(full, info, kind)
        if typ == "path":
            p, ci = key
            return self._select_jac(self._path_jacobian(z, p, ci), info, kind)
        if typ == "time":
            sl = self.layout.phases[key]
            out[0, sl.t0] = 1.0
            out[0, sl.tf] = -1.0
            if nrow > 1:
                out[1, sl.t0] = -1.0
                out[1, sl.tf] = 1.0
            return out
        raise AssertionError(typ)

    def _path_jacobian(self, z, p, ci):
        sl = self.layout.phases[p]
        Xs, Uf, t0s, tfs = self._path_points(z, p)
        npts, nx, nu = Xs.shape[0], sl.nx, sl.nu
        base = self._path_value_scaled(p, ci, Xs, Uf, t0s, tfs)
        nc = base.shape[1]
        full = np.zeros((npts * nc, self.layout.size))
        rows = np.arange(npts * nc).reshape(npts, nc)
        for j in range(nx):
            h = FD_EPS * (1.0 + np.abs(Xs[:, j]))
            xp, xm = Xs.copy(), Xs.copy()
            xp[:, j] += h
            xm[:, j] -= h
            d = (self._path_value_scaled(p, ci, xp, Uf, t0s, tfs)
                 - self._path_value_scaled(p, ci, xm, Uf, t0s, tfs)) / (2 * h)[:, None]
            for k in range(npts):
                full[rows[k], sl.state_index(k, j)] = d[k]
        w = self.grids[p].control_extrapolation()
        for j in range(nu):
            h = FD_EPS * (1.0 + np.abs(Uf[:, j]))
            up, um = Uf.copy(), Uf.copy()
            up[:, j] += h
            um[:, j] -= h
            d = (self._path_value_scaled(p, ci, Xs, up, t0s, tfs)
                 - self._path_value_scaled(p, ci, Xs, um, t0s, tfs)) / (2 * h)[:, None]
            for k in range(npts - 1):
                full[rows[k], sl.control_index(k, j)] = d[k]
            for k in range(npts - 1):
                full[rows[-1], sl.control_index(k, j)] += d[-1] * w[k]
        for idx, which in ((sl.t0, 0), (sl.tf, 1)):
            h = FD_EPS * (1.0 + abs(z[idx]))
            tp = [t0s, tfs]
            tm = [t0s, tfs]
            tp[which] = tp[which] + h
            tm[which] = tm[which] - h
            d = (self._path_value_scaled(p, ci, Xs, Uf, *tp) - self._path_value_scaled(p, ci, Xs, Uf, *tm)) / (2 * h)
            full[:, idx] = d.ravel()
        return full

    # ----------------------------------------------------------------- objective
    def _phase_cost(self, z, p):
        ph = self.problem.phases[p]
        grid = self.grids[p]
        Xs, Us, t0s, tfs = self.layout.unpack_scaled(z, p)
        X, U, t0, tf = self._phys(p, Xs, Us, t0s, tfs)
        J = 0.0
        if ph.mayer_cost is not None:
            J += float(ph.mayer_cost(X[0], t0, X[-1], tf, ph.params))
        if ph.lagrange_cost is not None:
            tk = 0.5 * (tf - t0) * grid.nodes[:-1] + 0.5 * (tf + t0)
            L = np.asarray(ph.lagrange_cost(X[:-1], U, tk, ph.params), dtype=float)
            J += 0.5 * (tf - t0) * float(grid.weights @ L)
        return J

    def objective(self, z):
        z = np.asarray(z, dtype=float)
        return sum(self._phase_cost(z, p) for p in range(len(self.problem.phases)))

    def objective_gradient(self, z):
        z = np.asarray(z, dtype=float)
        grad = np.zeros(self.layout.size)
        for p, ph in enumerate(self.problem.phases):
            sl = self.layout.phases[p]
            grid = self.grids[p]
            if ph.mayer_cost is not None:
                idx = np.array([sl.state_index(0, j) for j in range(sl.nx)] + [sl.t0]
                               + [sl.state_index(sl.n_nodes - 1, j) for j in range(sl.nx)] + [sl.tf])

                def mayer(a, p=p, ph=ph, sl=sl):
                    nx = sl.nx
                    x0 = ph.state_offset + ph.state_scale * a[:nx]
                    xf = ph.state_offset + ph.state_scale * a[nx + 1:2 * nx + 1]
                    return float(ph.mayer_cost(x0, a[nx] * ph.time_scale, xf,
                                               a[2 * nx + 1] * ph.time_scale, ph.params))
                grad[idx] += _fd_columns(mayer, z[idx])
            if ph.lagrange_cost is not None:
                Xs, Us, t0s, tfs = self.layout.unpack_scaled(z, p)
                N, nx, nu = ph.n_collocation, sl.nx, sl.nu
                t0, tf = t0s * ph.time_scale, tfs * ph.time_scale
                half = 0.5 * (tf - t0)
                tk = half * grid.nodes[:-1] + 0.5 * (tf + t0)

                def lag(Xc, Uc):
                    X = ph.state_offset + ph.state_scale * Xc
                    U = ph.control_offset + ph.control_scale * Uc
                    return np.asarray(ph.lagrange_cost(X, U, tk, ph.params), dtype=float)
                Xc = Xs[:-1]
                for j in range(nx):
                    h = FD_EPS * (1.0 + np.abs(Xc[:, j]))
                    xp, xm = Xc.copy(), Xc.copy()
                    xp[:, j] += h
                    xm[:, j] -= h
                    d = (lag(xp, Us) - lag(xm, Us)) / (2 * h)
                    for k in range(N):
                        grad[sl.state_index(k, j)] += half * grid.weights[k] * d[k]
                for j in range(nu):
                    h = FD_EPS * (1.0 + np.abs(Us[:, j]))
                    up, um = Us.copy(), Us.copy()
                    up[:, j] += h
                    um[:, j] -= h
                    d = (lag(Xc, up) - lag(Xc, um)) / (2 * h)
                    for k in range(N):
                        grad[sl.control_index(k, j)] += half * grid.weights[k] * d[k]
                for idx in (sl.t0, sl.tf):
                    h = FD_EPS * (1.0 + abs(z[idx]))
                    zp, zm = z.copy(), z.copy()
                    zp[idx] += h
                    zm[idx] -= h
                    fp = self._lagrange_only(zp, p)
                    fm = self._lagrange_only(zm, p)
                    grad[idx] += (fp - fm) / (2 * h)
        return grad

    def _lagrange_only(self, z, p):
        ph = self.problem.phases[p]
        grid = self.grids[p]
        Xs, Us, t0s, tfs = self.layout.unpack_scaled(z, p)
        X, U, t0, tf = self._phys(p, Xs, Us, t0s, tfs)
        tk = 0.5 * (tf - t0) * grid.nodes[:-1] + 0.5 * (tf + t0)
        return 0.5 * (tf - t0) * float(grid.weights @ ph.lagrange_cost(X[:-1], U, tk, ph.params))

    # ---------------------------------------------------------------- NLP rows
    def eq_constraints(self, z):
        z = np.asarray(z, dtype=float)
        if not self.eq_blocks:
            return np.zeros(0)
        return np.concatenate([self._block_value(z, b, "eq") for b in self.eq_blocks])

    def ineq_constraints(self, z):
        z = np.asarray(z, dtype=float)
        if not self.ineq_blocks:
            return np.zeros(0)
        return np.concatenate([self._block_value(z, b, "ineq") for b in self.ineq_blocks])

    def eq_jacobian(self, z):
        z = np.asarray(z, dtype=float)
        if not self.eq_blocks:
            return np.zeros((0, self.layout.size))
        return np.vstack([self._block_jac(z, b, "eq") for b in self.eq_blocks])

    def ineq_jacobian(self, z):
        z = np.asarray(z, dtype=float)
        if not self.ineq_blocks:
            return np.zeros((0, self.layout.size))
        return np.vstack([self._block_jac(z, b, "ineq") for b in self.ineq_blocks])

    def evaluate(self, z, derivatives=True):
        f = self.objective(z)
        g = self.eq_constraints(z)
        h = self.ineq_constraints(z)
        if not derivatives:
            return f, None, g, None, h, None
        return (f, self.objective_gradient(z), g, self.eq_jacobian(z), h, self.ineq_jacobian(z))

    def to_nlp(self) -> NlpProblem:
        lo, hi = self.variable_bounds()
        return NlpProblem(
            n=self.layout.size,
            objective=self.objective,
            eq_constraints=self.eq_constraints,
            ineq_constraints=self.ineq_constraints,
            lower=lo,
            upper=hi,
            x0=self.initial_guess(),
            m_eq=self.m_eq,
            m_ineq=self.m_ineq,
            objective_gradient=self.objective_gradient,
            eq_jacobian=self.eq_jacobian,
            ineq_jacobian=self.ineq_jacobian,
            evaluate=self.evaluate,
            transcription=self,
            hessian_elements=self.hessian_elements(),
        )

    # ------------------------------------------------------ Hessian structure
    def _endpoint_vars(self, p, start_part, end_part):
        sl = self.layout.phases[p]
        idx = []
        if start_part:
            idx += [sl.state_index(0, j) for j in range(sl.nx)] + [sl.t0]
        if end_part:
            idx += [sl.state_index(sl.n_nodes - 1, j) for j in range(sl.nx)] + [sl.tf]
        idx += list(range(sl.u.start, sl.u.stop)) if end_part else \
            [sl.control_index(0, j) for j in range(sl.nu)]
        return idx

    def hessian_elements(self) -> list:
        """Element decomposition of the Lagrangian for partitioned quasi-Newton updates."""
        elems = {}

        def get(key, vars_):
            if key not in elems:
                elems[key] = {"vars": sorted(set(vars_)), "eq": [], "in": [], "obj": None}
            return elems[key]

        def node_vars(p, k):
            sl = self.layout.phases[p]
            if k < sl.n_nodes - 1:
                return ([sl.state_index(k, j) for j in range(sl.nx)]
                        + [sl.control_index(k, j) for j in range(sl.nu)] + [sl.t0, sl.tf])
            return ([sl.state_index(k, j) for j in range(sl.nx)]
                    + list(range(sl.u.start, sl.u.stop)) + [sl.t0, sl.tf])

        for kind, blocks in (("eq", self.eq_blocks), ("in", self.ineq_blocks)):
            for typ, key, info, rows in blocks:
                if typ == "defect":
                    nx = self.layout.phases[key].nx
                    for k in range(self.problem.phases[key].n_collocation):
                        get(("node", key, k), node_vars(key, k))[kind] += list(
                            range(rows.start + k * nx, rows.start + (k + 1) * nx))
                elif typ == "path":
                    p, ci = key
                    eq, ub, lb = info[:3]
                    nc = np.atleast_1d(self.problem.phases[p].path_constraints[ci].lower).size
                    flat = eq if kind == "eq" else np.concatenate([ub, lb])
                    for r, f in enumerate(flat):
                        k = int(f) // nc
                        get(("node", p, k), node_vars(p, k))[kind].append(rows.start + r)
                elif typ == "boundary":
                    p, _ = key
                    get(("boundary", key), self._endpoint_vars(p, True, True))[kind] += list(
                        range(rows.start, rows.stop))
                elif typ == "linkage":
                    link = self.problem.linkages[key]
                    v = self._endpoint_vars(link.left, False, True) + self._endpoint_vars(link.right, True, False)
                    get(("linkage", key), v)[kind] += list(range(rows.start, rows.stop))
                # time rows are linear
        for p, ph in enumerate(self.problem.phases):
            sl = self.layout.phases[p]
            if ph.lagrange_cost is not None:
                for k in range(ph.n_collocation):
                    e = get(("node", p, k), node_vars(p, k))
                    e["obj"] = self._node_cost_gradient(p, k, e["vars"])
            if ph.mayer_cost is not None:
                v = ([sl.state_index(0, j) for j in range(sl.nx)] + [sl.t0]
                     + [sl.state_index(sl.n_nodes - 1, j) for j in range(sl.nx)] + [sl.tf])
                e = get(("mayer", p), v)
                e["obj"] = self._mayer_gradient(p, e["vars"])
        out = []
        for key in sorted(elems, key=str):
            e = elems[key]
            out.append(HessianElement(np.array(e["vars"], dtype=int), np.array(e["eq"], dtype=int),
                                      np.array(e["in"], dtype=int), e["obj"]))
        return out

    def _node_cost_gradient(self, p, k, vars_):
        ph = self.problem.phases[p]
        grid = self.grids[p]
        sl = self.layout.phases[p]
        vars_ = np.asarray(vars_)

        def share(z):
            Xs, Us, t0s, tfs = self.layout.unpack_scaled(z, p)
            X, U, t0, tf = self._phys(p, Xs[k:k + 1], Us[k:k + 1], t0s, tfs)
            tk = 0.5 * (tf - t0) * grid.nodes[k] + 0.5 * (tf + t0)
            L = float(np.asarray(ph.lagrange_cost(X, U, np.array([tk]), ph.params), dtype=float)[0])
            return 0.5 * (tf - t0) * grid.weights[k] * L

        def grad(z):
            z = np.asarray(z, dtype=float)
            out = np.empty(vars_.size)
            for i, v in enumerate(vars_):
                h = FD_EPS * (1.0 + abs(z[v]))
                zp, zm = z.copy(), z.copy()
                zp[v] += h
                zm[v] -= h
                out[i] = (share(zp) - share(zm)) / (2 * h)
            return out
        return grad

    def _mayer_gradient(self, p, vars_):
        ph = self.problem.phases[p]
        vars_ = np.asarray(vars_)

        def value(z):
            Xs, _, t0s, tfs = self.layout.unpack_scaled(z, p)
            x0 = ph.state_offset + ph.state_scale * Xs[0]
            xf = ph.state_offset + ph.state_scale * Xs[-1]
            return float(ph.mayer_cost(x0, t0s * ph.time_scale, xf, tfs * ph.time_scale, ph.params))

        def grad(z):
            z = np.asarray(z, dtype=float)
            out = np.empty(vars_.size)
            for i, v in enumerate(vars_):
                h = FD_EPS * (1.0 + abs(z[v]))
                zp, zm = z.copy(), z.copy()
                zp[v] += h
                zm[v] -= h
                out[i] = (value(zp) - value(zm)) / (2 * h)
            return out
        return grad


def assemble_defects(phase: PhaseSpec, grid: LGRGrid, values: PhaseValues) -> np.ndarray:
    """Collocation residuals in physical units, shape (N * nx,).

    ``residual_k = sum_i D_ki X_i - (tf - t0)/2 f(X_k, U_k, t_k)``.
    """
    if not values.tf > values.t0:
        raise ValueError("final time must exceed initial time")
    if grid.n != phase.n_collocation:
        raise ValueError("grid does not match the phase collocation count")
    X = np.asarray(values.states, dtype=float)
    U = np.asarray(values.controls, dtype=float)
    half = 0.5 * (values.tf - values.t0)
    tk = half * grid.nodes[:-1] + 0.5 * (values.tf + values.t0)
    F = np.asarray(phase.dynamics(X[:-1], U, tk, phase.params), dtype=float)
    return (grid.diff_matrix @ X - half * F).ravel()


def assemble_cost(problem: MultiphaseProblem, grids: Sequence[LGRGrid], values: Sequence[PhaseValues]) -> float:
    """Mayer terms plus LGR quadrature of the running cost, summed over phases."""
    J = 0.0
    for ph, grid, v in zip(problem.phases, grids, values):
        X = np.asarray(v.states, dtype=float)
        if ph.mayer_cost is not None:
            J += float(ph.mayer_cost(X[0], v.t0, X[-1], v.tf, ph.params))
        if ph.lagrange_cost is not None:
            half = 0.5 * (v.tf - v.t0)
            tk = half * grid.nodes[:-1] + 0.5 * (v.tf + v.t0)
            L = np.asarray(ph.lagrange_cost(X[:-1], np.asarray(v.controls), tk, ph.params), dtype=float)
            J += half * float(grid.weights @ L)
    return J


def transcribe(problem: MultiphaseProblem) -> NlpProblem:
    """Radau transcription of ``problem`` into a nonlinear program."""
    return Transcription(problem).to_nlp()
