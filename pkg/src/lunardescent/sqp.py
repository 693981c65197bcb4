"""Dense SQP solver with a dual active-set QP subproblem.

Solves ``min f(z)`` subject to ``g(z) = 0``, ``h(z) <= 0`` and simple
bounds.  Each iteration solves a convex QP built from a damped-BFGS
Lagrangian Hessian (Goldfarb-Idnani dual method, so the QP needs no
feasible starting point), then backtracks on the l1 merit function
``f + rho (|g|_1 + |max(h, 0)|_1)``.  A second-order correction is tried
when the full step is rejected.

Sign conventions for the multipliers:

    grad f + Jg^T lam + Jh^T mu + nu_u - nu_l = 0,   mu, nu_l, nu_u >= 0.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.optimize import linprog, lsq_linear

log = logging.getLogger(__name__)

FD_EPS = np.sqrt(np.finfo(float).eps)


class NumericalFailure(RuntimeError):
    """A callback returned a non-finite value."""


@dataclass
class SolverOptions:
    kkt_tolerance: float = 1e-6
    constraint_tolerance: float = 1e-8
    max_iterations: int = 500
    fd_step: float = FD_EPS  # relative central-difference step, h = fd_step * (1 + |z|)
    penalty_factor: float = 1.1  # rho >= penalty_factor * |multipliers|_inf
    penalty_initial: float = 1.0
    armijo: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-10
    second_order_correction: bool = True
    hessian_floor: float = 1e-3  # eigenvalue floor of each quasi-Newton block
    time_limit: float | None = None  # wall-clock budget, s; stops as max-iterations
    iteration_log: Callable | None = None  # called with one dict per iteration
    log_file: str | None = None  # line-delimited JSON records
    verbose: bool = False

    def __post_init__(self):
        if not (self.kkt_tolerance > 0 and self.constraint_tolerance > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if self.penalty_factor < 1:
            raise ValueError("penalty_factor must be >= 1")
        if not self.hessian_floor > 0:
            raise ValueError("hessian_floor must be positive")
        if self.time_limit is not None and not self.time_limit > 0:
            raise ValueError("time_limit must be positive")


@dataclass
class SolverResult:
    z: np.ndarray
    objective: float
    eq_violation: float
    ineq_violation: float
    kkt_residual: float
    iterations: int
    status: str  # converged | max-iterations | infeasible | numerical-failure
    eq_multipliers: np.ndarray | None = None
    ineq_multipliers: np.ndarray | None = None
    bound_multipliers: np.ndarray | None = None  # nu_u - nu_l
    restoration_steps: int = 0
    history: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


@dataclass
class QPResult:
    step: np.ndarray
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    lower_multipliers: np.ndarray
    upper_multipliers: np.ndarray
    status: str  # optimal | infeasible | inconsistent | iteration-limit
    restoration: bool = False
    active_ineq: np.ndarray | None = None


def fd_jacobian(callback: Callable, z, step: float = FD_EPS) -> np.ndarray:
    """Central-difference Jacobian with ``h_i = step * (1 + |z_i|)``.

    Returns shape (m, n) for vector callbacks and (n,) for scalar ones.
    """
    z = np.asarray(z, dtype=float)
    base = np.asarray(callback(z), dtype=float)
    if not np.all(np.isfinite(base)):
        raise NumericalFailure("callback not finite at the base point")
    cols = []
    for i in range(z.size):
        h = step * (1.0 + abs(z[i]))
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        fp = np.asarray(callback(zp), dtype=float)
        fm = np.asarray(callback(zm), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NumericalFailure(f"non-finite output perturbing component {i}")
        cols.append((fp - fm) / (2 * h))
    if base.ndim == 0:
        return np.array(cols)
    return np.stack(cols, axis=-1).reshape(base.size, z.size)


# --------------------------------------------------------------------------- QP
class _DualActiveSet:
    """Goldfarb-Idnani state: ``J^T N_A = [R; 0]`` with ``J J^T = H^{-1}``."""

    def __init__(self, H, g):
        L = linalg.cholesky(H, lower=True)
        self.n = H.shape[0]
        self.J = linalg.solve_triangular(L, np.eye(self.n), lower=True).T
        self.R = np.zeros((0, 0))
        self.x = -(self.J @ (self.J.T @ g))
        self.u = np.zeros(0)
        self.active: list = []

    @property
    def q(self) -> int:
        return len(self.active)

    def add_equalities(self, N, c, tol=1e-10):
        """Batch-activate equality rows ``N x = c``; returns (kept, dropped)."""
        m = N.shape[0]
        if m == 0:
            return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        M = self.J.T @ N.T
        Q, Rf, piv = linalg.qr(M, pivoting=True, mode="full")
        diag = np.abs(np.diag(Rf)) if min(Rf.shape) else np.zeros(0)
        if diag.size == 0 or diag[0] == 0:
            return np.zeros(0, dtype=int), np.arange(m)
        rank = int(np.sum(diag > tol * diag[0]))
        self.J = self.J @ Q
        R = Rf[:rank, :rank]
        kept = piv[:rank]
        x0 = self.x
        y = linalg.solve_triangular(R, c[kept] - N[kept] @ x0, trans="T")
        self.x = x0 + self.J[:, :rank] @ y
        self.u = linalg.solve_triangular(R, y)
        self.R = R
        self.active = [("e", int(k)) for k in kept]
        return kept, piv[rank:]

    def step_direction(self, d):
        q = self.q
        z = self.J[:, q:] @ d[q:]
        r = linalg.solve_triangular(self.R, d[:q]) if q else np.zeros(0)
        return z, r

    def add(self, key, d):
        q = self.q
        d2 = d[q:]
        nrm = np.linalg.norm(d2)
        delta = -np.copysign(nrm, d2[0]) if d2[0] != 0 else -nrm
        v = d2.copy()
        v[0] -= delta
        vv = v @ v
        if vv > 0:
            J2 = self.J[:, q:]
            self.J[:, q:] = J2 - np.outer(J2 @ v, (2.0 / vv) * v)
        R = np.zeros((q + 1, q + 1))
        R[:q, :q] = self.R
        R[:q, q] = d[:q]
        R[q, q] = delta
        self.R = R
        self.active.append(key)

    def drop(self, pos):
        q = self.q
        R = np.delete(self.R, pos, axis=1)
        for k in range(pos, q - 1):
            a, b = R[k, k], R[k + 1, k]
            rr = np.hypot(a, b)
            if rr == 0:
                continue
            c, s = a / rr, b / rr
            rk, rk1 = R[k].copy(), R[k + 1].copy()
            R[k], R[k + 1] = c * rk + s * rk1, -s * rk + c * rk1
            jk, jk1 = self.J[:, k].copy(), self.J[:, k + 1].copy()
            self.J[:, k], self.J[:, k + 1] = c * jk + s * jk1, -s * jk + c * jk1
        self.R = R[: q - 1]
        self.u = np.delete(self.u, pos)
        del self.active[pos]


def qp_subproblem(H, gradient, eq_matrix=None, eq_rhs=None, ineq_matrix=None, ineq_rhs=None,
                  lower=None, upper=None, max_iter=None, tol=1e-10) -> QPResult:
    """Solve ``min 1/2 d'Hd + gradient'd`` subject to

    ``eq_matrix d = eq_rhs``, ``ineq_matrix d <= ineq_rhs`` and
    ``lower <= d <= upper`` with the Goldfarb-Idnani dual active-set method.

    ``H`` must be symmetric positive definite.  Multipliers follow
    ``H d + gradient + A_E' lam + A_I' mu + nu_u - nu_l = 0``.
    """
    H = np.asarray(H, dtype=float)
    gvec = np.asarray(gradient, dtype=float)
    n = gvec.size
    AE = np.zeros((0, n)) if eq_matrix is None else np.asarray(eq_matrix, dtype=float).reshape(-1, n)
    bE = np.zeros(0) if eq_rhs is None else np.asarray(eq_rhs, dtype=float).ravel()
    AI = np.zeros((0, n)) if ineq_matrix is None else np.asarray(ineq_matrix, dtype=float).reshape(-1, n)
    bI = np.zeros(0) if ineq_rhs is None else np.asarray(ineq_rhs, dtype=float).ravel()
    lo = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    hi = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    mE, mI = AE.shape[0], AI.shape[0]
    if max_iter is None:
        max_iter = 10 * (n + mI) + 50

    st = _DualActiveSet(H, gvec)
    kept, dropped = st.add_equalities(AE, bE, tol=1e-12)
    status = "optimal"
    if dropped.size:
        resid = np.abs(AE[dropped] @ st.x - bE[dropped])
        if np.any(resid > 1e-8 * (1.0 + np.abs(bE[dropped]))):
            status = "inconsistent"

    # inequality catalogue in the form n_k' d >= c_k
    gen_norm = np.linalg.norm(AI, axis=1) if mI else np.zeros(0)
    gen_norm[gen_norm == 0] = 1.0
    has_lo = np.isfinite(lo)
    has_hi = np.isfinite(hi)
    active_mask_gen = np.zeros(mI, dtype=bool)
    active_mask_lo = np.zeros(n, dtype=bool)
    active_mask_hi = np.zeros(n, dtype=bool)

    def jt_normal(key):
        kind, k = key
        if kind == "i":
            return -(st.J.T @ AI[k])
        if kind == "l":
            return st.J[k].copy()
        return -st.J[k].copy()

    def normal_dot(key, vec):
        kind, k = key
        if kind == "i":
            return -(AI[k] @ vec)
        if kind == "l":
            return vec[k]
        return -vec[k]

    def slack(key, x):
        kind, k = key
        if kind == "i":
            return bI[k] - AI[k] @ x
        if kind == "l":
            return x[k] - lo[k]
        return hi[k] - x[k]

    def set_mask(key, value):
        kind, k = key
        {"i": active_mask_gen, "l": active_mask_lo, "u": active_mask_hi}[kind][k] = value

    iters = 0
    while status != "inconsistent":
        x = st.x
        # most violated inactive constraint (normalized)
        best, best_key = -tol, None
        if mI:
            s = (bI - AI @ x) / gen_norm
            s[active_mask_gen] = np.inf
            k = int(np.argmin(s))
            if s[k] < best:
                best, best_key = s[k], ("i", k)
        with np.errstate(invalid="ignore"):
            sl = np.where(has_lo & ~active_mask_lo, x - lo, np.inf)
            su = np.where(has_hi & ~active_mask_hi, hi - x, np.inf)
        k = int(np.argmin(sl))
        if sl[k] < best:
            best, best_key = sl[k], ("l", k)
        k = int(np.argmin(su))
        if su[k] < best:
            best, best_key = su[k], ("u", k)
        if best_key is None:
            break
        p = best_key
        u_p = 0.0
        while True:
            iters += 1
            if iters > max_iter:
                status = "iteration-limit"
                break
            d = jt_normal(p)
            z, r = st.step_direction(d)
            q = st.q
            # partial step: an active inequality multiplier hits zero
            t1, drop_pos = np.inf, None
            for j in range(q):
                if st.active[j][0] != "e" and r[j] > 1e-14 * max(1.0, abs(st.u[j])):
                    tj = st.u[j] / r[j]
                    if tj < t1:
                        t1, drop_pos = tj, j
            zn = float(d[q:] @ d[q:])
            s_p = slack(p, st.x)
            t2 = -s_p / zn if zn > 1e-14 * max(1.0, float(d @ d)) else np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                status = "infeasible"
                break
            if not np.isfinite(t2):
                st.u = st.u - t1 * r
                u_p += t1
                set_mask(st.active[drop_pos], False)
                st.drop(drop_pos)
                continue
            t = min(t1, t2)
            st.x = st.x + t * z
            st.u = st.u - t * r
            u_p += t
            if t2 <= t1:
                st.add(p, d)
                st.u = np.append(st.u, u_p)
                set_mask(p, True)
                break
            set_mask(st.active[drop_pos], False)
            st.drop(drop_pos)
        if status != "optimal":
            break

    lam = np.zeros(mE)
    mu = np.zeros(mI)
    nl = np.zeros(n)
    nu = np.zeros(n)
    for (kind, k), val in zip(st.active, st.u):
        if kind == "e":
            lam[k] = -val
        elif kind == "i":
            mu[k] = max(val, 0.0)
        elif kind == "l":
            nl[k] = max(val, 0.0)
        else:
            nu[k] = max(val, 0.0)
    return QPResult(step=st.x, eq_multipliers=lam, ineq_multipliers=mu,
                    lower_multipliers=nl, upper_multipliers=nu, status=status,
                    active_ineq=np.flatnonzero(active_mask_gen))


def _elastic_targets(Jg, g, Jh, h, lower, upper):
    """Smallest achievable l1 violation of the linearized constraints.

    Solves the elastic LP ``min sum(p + q) + sum(t)`` with
    ``Jg d - p + q = -g``, ``Jh d - t <= -h``, ``lower <= d <= upper`` and
    returns the relaxed right-hand sides ``(-g + p - q, -h + t)``, for
    which the QP is consistent.  ``None`` if the LP fails.
    """
    n, me, mi = lower.size, g.size, h.size
    c = np.concatenate([np.zeros(n), np.ones(2 * me + mi)])
    a_eq = np.hstack([Jg, -np.eye(me), np.eye(me), np.zeros((me, mi))]) if me else None
    a_ub = np.hstack([Jh, np.zeros((mi, 2 * me)), -np.eye(mi)]) if mi else None
    bounds = [(a if np.isfinite(a) else None, b if np.isfinite(b) else None)
              for a, b in zip(np.minimum(lower, 0.0), np.maximum(upper, 0.0))]
    bounds += [(0.0, None)] * (2 * me + mi)
    res = linprog(c, A_ub=a_ub, b_ub=-h if mi else None, A_eq=a_eq, b_eq=-g if me else None,
                  bounds=bounds, method="highs")
    if res.status != 0:
        return None
    sl = res.x[n:]
    pq = sl[:me] - sl[me:2 * me]
    t = sl[2 * me:]
    # a tiny margin keeps the relaxed inequalities strictly consistent
    return -g + pq, -h + t + 1e-12


def _restoration_step(Jg, g, Jh, h, lower, upper, reg=1e-8):
    """Bounded least-squares step reducing the linearized violation."""
    rows = [Jg]
    rhs = [-g]
    viol = h > -1e-8
    if np.any(viol):
        rows.append(Jh[viol])
        rhs.append(-h[viol])
    n = lower.size
    rows.append(np.sqrt(reg) * np.eye(n))
    rhs.append(np.zeros(n))
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    lo = np.minimum(lower, 0.0)
    hi = np.maximum(upper, 0.0)
    d = np.zeros(n)
    fixed = hi - lo <= 1e-14
    d[fixed] = np.clip(0.0, lo[fixed], hi[fixed])
    free = ~fixed
    b = b - A[:, fixed] @ d[fixed]
    res = lsq_linear(A[:, free], b, bounds=(lo[free], hi[free]),
                     method="bvls" if free.sum() <= 200 else "trf", lsmr_tol="auto")
    d[free] = res.x
    return d


# -------------------------------------------------------------------- the NLP
class _Evaluator:
    def __init__(self, nlp, options):
        self.nlp = nlp
        self.opt = options
        self.n_eval = 0

    def values(self, z):
        try:
            return self._values(z)
        except NumericalFailure:
            raise
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            raise NumericalFailure(f"callback failed: {exc}") from exc

    def all(self, z):
        try:
            return self._all(z)
        except NumericalFailure:
            raise
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            raise NumericalFailure(f"callback failed: {exc}") from exc

    def _values(self, z):
        self.n_eval += 1
        if self.nlp.evaluate is not None:
            f, _, g, _, h, _ = self.nlp.evaluate(z, derivatives=False)
        else:
            f = self.nlp.objective(z)
            g = self.nlp.eq_constraints(z)
            h = self.nlp.ineq_constraints(z)
        f = float(f)
        g = np.asarray(g, dtype=float).ravel()
        h = np.asarray(h, dtype=float).ravel()
        if not (np.isfinite(f) and np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
            raise NumericalFailure("non-finite objective or constraint value")
        return f, g, h

    def _all(self, z):
        nlp = self.nlp
        n = z.size
        if nlp.evaluate is not None:
            f, df, g, Jg, h, Jh = nlp.evaluate(z, derivatives=True)
        else:
            f, g, h = self.values(z)
            df = nlp.objective_gradient(z) if nlp.objective_gradient else fd_jacobian(nlp.objective, z, self.opt.fd_step)
            if g.size:
                Jg = nlp.eq_jacobian(z) if nlp.eq_jacobian else fd_jacobian(nlp.eq_constraints, z, self.opt.fd_step)
            else:
                Jg = np.zeros((0, n))
            if h.size:
                Jh = nlp.ineq_jacobian(z) if nlp.ineq_jacobian else fd_jacobian(nlp.ineq_constraints, z, self.opt.fd_step)
            else:
                Jh = np.zeros((0, n))
        f = float(f)
        df = np.asarray(df, dtype=float).ravel()
        g = np.asarray(g, dtype=float).ravel()
        h = np.asarray(h, dtype=float).ravel()
        Jg = np.asarray(Jg, dtype=float).reshape(g.size, n)
        Jh = np.asarray(Jh, dtype=float).reshape(h.size, n)
        for a in (df, g, h, Jg, Jh):
            if not np.all(np.isfinite(a)):
                raise NumericalFailure("non-finite derivative")
        if not np.isfinite(f):
            raise NumericalFailure("non-finite objective")
        return f, df, g, Jg, h, Jh


def _violation(g, h):
    return (float(np.max(np.abs(g))) if g.size else 0.0,
            float(np.max(np.maximum(h, 0.0))) if h.size else 0.0)


def _l1(g, h):
    return float(np.sum(np.abs(g)) + np.sum(np.maximum(h, 0.0)))


def _kkt(df, Jg, Jh, h, z, lo, hi, lam, mu, nu_bound):
    stat = df + Jg.T @ lam + Jh.T @ mu + nu_bound
    res = float(np.max(np.abs(stat))) if stat.size else 0.0
    comp = 0.0
    if h.size:
        comp = max(comp, float(np.max(np.abs(mu * h))))
    gap_lo = np.where(np.isfinite(lo), z - lo, 0.0)
    gap_hi = np.where(np.isfinite(hi), hi - z, 0.0)
    comp = max(comp, float(np.max(np.abs(np.minimum(nu_bound, 0.0) * gap_lo), initial=0.0)),
               float(np.max(np.abs(np.maximum(nu_bound, 0.0) * gap_hi), initial=0.0)))
    return max(res, comp)


def solve(nlp, options: SolverOptions | None = None, x0=None) -> SolverResult:
    """Run SQP on ``nlp`` (an :class:`~lunardescent.transcription.NlpProblem`)."""
    opt = options or SolverOptions()
    ev = _Evaluator(nlp, opt)
    lo = np.asarray(nlp.lower, dtype=float)
    hi = np.asarray(nlp.upper, dtype=float)
    z = np.clip(np.asarray(nlp.x0 if x0 is None else x0, dtype=float).copy(), lo, hi)
    n = z.size
    history: list = []
    sink = open(opt.log_file, "a") if opt.log_file else None

    def record(entry):
        history.append(entry)
        if opt.iteration_log is not None:
            opt.iteration_log(entry)
        if sink is not None:
            sink.write(json.dumps(entry) + "\n")
        if opt.verbose:
            log.info("it %(iteration)4d f=%(objective)+.8e |g|=%(eq_violation).2e "
                     "|h+|=%(ineq_violation).2e |d|=%(step_norm).2e a=%(alpha).1e rho=%(penalty).2e", entry)

    def finish(status, z, f, g, h, kkt, it, lam=None, mu=None, nub=None, nrest=0):
        if sink is not None:
            sink.close()
        ve, vi = _violation(g, h)
        return SolverResult(z=z, objective=f, eq_violation=ve, ineq_violation=vi,
                            kkt_residual=kkt, iterations=it, status=status,
                            eq_multipliers=lam, ineq_multipliers=mu, bound_multipliers=nub,
                            restoration_steps=nrest, history=history)

    try:
        f, df, g, Jg, h, Jh = ev.all(z)
    except NumericalFailure:
        return finish("numerical-failure", z, np.nan, np.full(nlp.m_eq, np.nan),
                      np.full(nlp.m_ineq, np.nan), np.inf, 0)

    hess = _make_hessian(n, getattr(nlp, "hessian_elements", None), opt.hessian_floor)
    B = hess.matrix()
    rho = opt.penalty_initial
    lam = np.zeros(g.size)
    mu = np.zeros(h.size)
    nub = np.zeros(n)
    best = None
    n_rest = 0
    ls_fail = 0
    kkt = np.inf
    status = "max-iterations"

    started = time.perf_counter()
    done = 0
    for it in range(1, opt.max_iterations + 1):
        if opt.time_limit is not None and time.perf_counter() - started > opt.time_limit:
            break
        done = it
        ctol = opt.constraint_tolerance
        # QP at the current iterate
        restoration = False
        try:
            qp = qp_subproblem(B, df, Jg, -g, Jh, -h, lo - z, hi - z)
        except linalg.LinAlgError:
            hess.reset()
            B = hess.matrix()
            qp = qp_subproblem(B, df, Jg, -g, Jh, -h, lo - z, hi - z)
        relaxed = False
        if qp.status != "optimal":
            # inconsistent linearization: aim at the least-violation targets
            targets = _elastic_targets(Jg, g, Jh, h, lo - z, hi - z)
            if targets is not None:
                qp = qp_subproblem(B, df, Jg, targets[0], Jh, targets[1], lo - z, hi - z)
                relaxed = qp.status == "optimal"
        if qp.status != "optimal":
            restoration = True
            n_rest += 1
            d = _restoration_step(Jg, g, Jh, h, lo - z, hi - z)
            lam_new, mu_new, nub_new = lam, mu, nub
        else:
            d = qp.step
            lam_new = qp.eq_multipliers
            mu_new = qp.ineq_multipliers
            nub_new = qp.upper_multipliers - qp.lower_multipliers

        ve, vi = _violation(g, h)
        kkt = _kkt(df, Jg, Jh, h, z, lo, hi, lam_new, mu_new, nub_new) if not (restoration or relaxed) else np.inf
        dnorm = float(np.max(np.abs(d))) if n else 0.0
        entry = {"iteration": it, "objective": f, "eq_violation": ve, "ineq_violation": vi,
                 "step_norm": dnorm, "penalty": rho, "kkt": kkt, "restoration": restoration,
                 "relaxed": relaxed,
                 "alpha": 0.0, "step_argmax": int(np.argmax(np.abs(d))) if n else -1}
        key = (max(ve, vi, ctol), f)
        if best is None or key < best[0]:
            best = (key, z.copy(), f, g.copy(), h.copy(), kkt, lam_new, mu_new, nub_new)
        if ve <= ctol and vi <= ctol and kkt <= opt.kkt_tolerance:
            record(entry)
            status = "converged"
            return finish(status, z, f, g, h, kkt, it, lam_new, mu_new, nub_new, n_rest)
        if ve <= ctol and vi <= ctol and dnorm <= 1e-12 * (1 + np.max(np.abs(z))):
            # no further progress possible at this precision
            status = "converged" if kkt <= 10 * opt.kkt_tolerance else status
            if status == "converged":
                record(entry)
                return finish(status, z, f, g, h, kkt, it, lam_new, mu_new, nub_new, n_rest)

        viol1 = _l1(g, h)
        lin_viol = _l1(g + Jg @ d, h + Jh @ d) if not restoration else viol1
        if relaxed:
            # multipliers of the relaxed QP are unreliable; take the smallest
            # penalty that makes d a descent direction of the merit
            decrease = viol1 - lin_viol
            model = float(df @ d) + 0.5 * float(d @ B @ d)
            rho_req = opt.penalty_factor * max(model, 0.0) / decrease if decrease > 0 else rho
            rho = max(rho, rho_req)
        elif not restoration:
            # rho >= factor * |multipliers|, relaxed towards the requirement
            # when it falls (Powell's averaging rule)
            mults = np.concatenate([np.abs(lam_new), mu_new]) if (g.size or h.size) else np.zeros(1)
            rho_req = opt.penalty_factor * float(np.max(mults, initial=0.0))
            rho = max(rho_req, 0.5 * (rho + rho_req), opt.penalty_initial * 1e-3)
        phi0 = f + rho * viol1
        slope = float(df @ d) + rho * (lin_viol - viol1)
        if restoration:
            # pure feasibility step: line search on the violation only
            slope = -max(viol1 - _l1(g + Jg @ d, h + Jh @ d), 0.0)

        def merit(ztry):
            ft, gt, ht = ev.values(ztry)
            if restoration:
                return _l1(gt, ht), (ft, gt, ht)
            return ft + rho * _l1(gt, ht), (ft, gt, ht)

        base = viol1 if restoration else phi0
        alpha = 1.0
        accepted = None
        try:
            while alpha >= opt.min_step:
                ztry = np.clip(z + alpha * d, lo, hi)
                try:
                    phi, vals = merit(ztry)
                except NumericalFailure:
                    phi, vals = np.inf, None
                if phi <= base + opt.armijo * alpha * min(slope, 0.0) and vals is not None:
                    accepted = (ztry, vals)
                    break
                if alpha == 1.0 and opt.second_order_correction and vals is not None and not restoration:
                    _, gt, ht = vals
                    zc = _second_order_correction(z, d, gt, ht, Jg, Jh, qp, lo, hi)
                    if zc is not None:
                        try:
                            phic, valsc = merit(zc)
                        except NumericalFailure:
                            phic, valsc = np.inf, None
                        if valsc is not None and phic <= base + opt.armijo * min(slope, 0.0):
                            accepted = (zc, valsc)
                            break
                alpha *= opt.backtrack
        except NumericalFailure:
            accepted = None

        entry["alpha"] = alpha if accepted is not None else 0.0
        entry["penalty"] = rho
        record(entry)
        if accepted is None:
            ls_fail += 1
            if ls_fail >= 3:
                b = best
                status = "infeasible" if max(b[0][0], 0) > ctol else "numerical-failure"
                if b[0][0] <= ctol and b[5] <= 10 * opt.kkt_tolerance:
                    status = "converged"
                return finish(status, b[1], b[2], b[3], b[4], b[5], it, b[6], b[7], b[8], n_rest)
            hess.reset()
            B = hess.matrix()
            continue
        ls_fail = 0
        z_new, (f_new, g_new, h_new) = accepted
        try:
            f_new, df_new, g_new, Jg_new, h_new, Jh_new = ev.all(z_new)
        except NumericalFailure:
            b = best
            return finish("numerical-failure", b[1], b[2], b[3], b[4], b[5], it, b[6], b[7], b[8], n_rest)

        if not (restoration or relaxed):
            lam, mu, nub = lam_new, mu_new, nub_new
        hess.update(z, z_new, (df, Jg, Jh), (df_new, Jg_new, Jh_new), lam, mu)
        B = hess.matrix()
        z, f, df, g, Jg, h, Jh = z_new, f_new, df_new, g_new, Jg_new, h_new, Jh_new

    return finish(status, z, f, g, h, kkt, done, lam, mu, nub, n_rest)


def _second_order_correction(z, d, gt, ht, Jg, Jh, qp, lo, hi):
    """Least-norm correction pulling the trial point back onto the active constraints."""
    rows = [Jg] if Jg.shape[0] else []
    rhs = [-gt] if Jg.shape[0] else []
    if qp is not None and qp.active_ineq is not None and qp.active_ineq.size:
        rows.append(Jh[qp.active_ineq])
        rhs.append(-ht[qp.active_ineq])
    if not rows:
        return None
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    try:
        dc, *_ = np.linalg.lstsq(A, b, rcond=1e-12)
    except np.linalg.LinAlgError:
        return None
    return np.clip(z + d + dc, lo, hi)


class _DenseBFGS:
    def __init__(self, n):
        self.n = n
        self.reset()

    def reset(self):
        self.B = np.eye(self.n)
        self.first = True

    def matrix(self):
        return self.B

    def update(self, z, z_new, old, new, lam, mu):
        df, Jg, Jh = old
        df_new, Jg_new, Jh_new = new
        y = (df_new - df) + (Jg_new - Jg).T @ lam + (Jh_new - Jh).T @ mu
        self.B = _damped_bfgs(self.B, z_new - z, y, first=self.first)
        self.first = False


class _PartitionedBFGS:
    """Damped BFGS on each element of a partially separable Lagrangian.

    ``B = diag(base) + sum_e P_e' B_e P_e``; each block is updated with its
    own step and gradient change, so one iteration informs every element.
    Variables outside all elements only appear linearly and get a unit
    diagonal.
    """

    def __init__(self, n, elements, floor=1e-3):
        self.n = n
        self.floor = floor
        self.elements = elements
        covered = np.zeros(n, dtype=bool)
        for e in elements:
            covered[e.vars] = True
        self.base = np.where(covered, 1e-8, 1.0)
        self.reset()

    def reset(self):
        self.blocks = [np.eye(e.vars.size) for e in self.elements]
        self.first = [True] * len(self.elements)

    def matrix(self):
        B = np.diag(self.base)
        for e, Be in zip(self.elements, self.blocks):
            B[np.ix_(e.vars, e.vars)] += Be
        return B

    def update(self, z, z_new, old, new, lam, mu):
        df, Jg, Jh = old
        df_new, Jg_new, Jh_new = new
        s = z_new - z
        for i, e in enumerate(self.elements):
            v = e.vars
            se = s[v]
            if not np.any(se):
                continue
            ye = np.zeros(v.size)
            if e.eq_rows.size:
                r = e.eq_rows
                ye += (Jg_new[np.ix_(r, v)] - Jg[np.ix_(r, v)]).T @ lam[r]
            if e.ineq_rows.size:
                r = e.ineq_rows
                ye += (Jh_new[np.ix_(r, v)] - Jh[np.ix_(r, v)]).T @ mu[r]
            if e.objective_gradient is not None:
                ye += e.objective_gradient(z_new) - e.objective_gradient(z)
            self.blocks[i] = _clip_spectrum(_damped_bfgs(self.blocks[i], se, ye, first=self.first[i]), self.floor)
            self.first[i] = False


def _clip_spectrum(B, lo=1e-6, hi=1e8):
    w, V = np.linalg.eigh(B)
    if w[0] >= lo and w[-1] <= hi:
        return B
    return (V * np.clip(w, lo, hi)) @ V.T


def _make_hessian(n, elements, floor=1e-3):
    if elements:
        return _PartitionedBFGS(n, elements, floor)
    return _DenseBFGS(n)


def _damped_bfgs(B, s, y, first=False):
    """Powell-damped BFGS update keeping ``B`` positive definite."""
    ss = float(s @ s)
    if ss == 0:
        return B
    if first:
        sy = float(s @ y)
        yy = float(y @ y)
        if sy > 0 and yy > 0:
            B = np.eye(B.shape[0]) * (yy / sy)
        elif yy == 0:
            # no curvature seen along s: shrink towards a small multiple of I
            B = np.eye(B.shape[0]) * 1e-4
    Bs = B @ s
    sBs = float(s @ Bs)
    sy = float(s @ y)
    if sBs <= 0:
        return B
    if sy < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sy)
        y = theta * y + (1 - theta) * Bs
        sy = float(s @ y)
    B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
    return 0.5 * (B + B.T)
