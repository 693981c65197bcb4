"""Three-phase powered-descent forward pass.

Rough braking (30 km orbit to 7.4 km) and fine braking (to 800 m above the
landing site) are flown in rotating spherical dynamics; terminal descent
to touchdown uses the flat-moon model.  A fixed 10 s attitude hold between
the braking phases is not optimized: it enters as an equality linkage that
wraps an RK propagation.  The objective is the final mass.

The default orbit runs north (``v > 0`` advances latitude), so the default
site is placed in the northern hemisphere at the mirror image of the
southern target latitude; the equations are symmetric under
``phi -> -phi, v -> -v``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dyn
from .lgr import LGRGrid, lgr_grid
from .sqp import SolverOptions, SolverResult, solve
from .transcription import (BoundaryConstraint, LinkageSpec, MultiphaseProblem, PathConstraint,
                            PhaseGuess, PhaseSpec, Transcription)

PHASE_NAMES = ("rough_braking", "fine_braking", "terminal_descent")


@dataclass
class MissionConfig:
    initial_altitude: float = 30_000.0  # m above mean surface
    initial_velocity: float = 1_680.0  # m/s
    initial_mass: float = 1_729.0  # kg
    rough_braking_altitude: float = 7_400.0  # m above mean surface
    v_sops: float = 100.0  # m/s
    fine_braking_altitude: float = 800.0  # m above the landing-site terrain
    landing_latitude_deg: float = 69.37356
    landing_longitude_deg: float = 32.31975
    terrain_elevation: float = 883.0  # m above mean surface
    collocation: tuple = (30, 30, 15)
    engine_count: tuple = (4, 4, 2)
    min_thrust_fraction: float = 0.3
    duration_bounds: tuple = ((100.0, 1500.0), (100.0, 1500.0), (10.0, 300.0))
    duration_guess: tuple = (650.0, 150.0, 40.0)
    attitude_hold_duration: float = 10.0  # s
    attitude_hold_alpha_deg: float = 50.0
    attitude_hold_step: float = 0.5  # s, RK step inside the linkage
    rough_braking_exit_alpha_deg: float = 50.0
    constants: dyn.MoonConstants = field(default_factory=dyn.MoonConstants)

    def __post_init__(self):
        self.collocation = tuple(int(n) for n in self.collocation)
        self.engine_count = tuple(int(n) for n in self.engine_count)
        self.duration_bounds = tuple(tuple(float(v) for v in b) for b in self.duration_bounds)
        self.duration_guess = tuple(float(v) for v in self.duration_guess)
        if not self.v_sops > 0:
            raise ValueError("v_sops must be positive")
        if not (self.initial_altitude > self.rough_braking_altitude
                > self.terrain_elevation + self.fine_braking_altitude > self.terrain_elevation):
            raise ValueError("phase altitudes must strictly decrease")
        if self.fine_braking_altitude <= 0:
            raise ValueError("fine_braking_altitude must be positive")
        if not (self.initial_velocity > 0 and self.initial_mass > self.constants.dry_mass):
            raise ValueError("initial velocity and mass must be positive (mass above dry floor)")
        if len(self.collocation) != 3 or min(self.collocation) < 1:
            raise ValueError("collocation needs three counts >= 1")
        if len(self.engine_count) != 3 or min(self.engine_count) < 1:
            raise ValueError("engine_count needs three counts >= 1")
        if not 0 <= self.min_thrust_fraction < 1:
            raise ValueError("min_thrust_fraction must lie in [0, 1)")
        if len(self.duration_bounds) != 3 or any(not 0 < lo <= hi for lo, hi in self.duration_bounds):
            raise ValueError("duration_bounds need three (lo, hi) pairs with 0 < lo <= hi")
        if len(self.duration_guess) != 3 or any(d <= 0 for d in self.duration_guess):
            raise ValueError("duration_guess needs three positive values")
        if not (self.attitude_hold_duration > 0 and self.attitude_hold_step > 0):
            raise ValueError("attitude hold duration and step must be positive")
        if not -90 < self.landing_latitude_deg < 90:
            raise ValueError("landing latitude must lie strictly between the poles")

    @property
    def landing_latitude(self) -> float:
        return math.radians(self.landing_latitude_deg)

    @property
    def landing_longitude(self) -> float:
        return math.radians(self.landing_longitude_deg)

    @property
    def site_radius(self) -> float:
        return self.constants.radius + self.terrain_elevation

    def thrust_bounds(self, phase: int) -> tuple[float, float]:
        tmax = self.constants.max_thrust(self.engine_count[phase])
        return self.min_thrust_fraction * tmax, tmax

    def site_reference(self) -> np.ndarray:
        """Spherical state of the landing site (ground point, at rest)."""
        return np.array([self.site_radius, self.landing_longitude, self.landing_latitude,
                         0.0, 0.0, 0.0, self.initial_mass])


@dataclass
class PhaseTrajectory:
    name: str
    grid: LGRGrid
    states: np.ndarray  # (N+1, 7)
    controls: np.ndarray  # (N, 3): T, alpha, beta
    t0: float
    tf: float
    frame: str  # "spherical" or "local"
    raw_controls: np.ndarray | None = None  # NLP controls when they differ from (T, alpha, beta)

    @property
    def control_mode(self) -> str:
        return "body" if self.raw_controls is None else "vector"

    @property
    def times(self) -> np.ndarray:
        return 0.5 * (self.tf - self.t0) * self.grid.nodes + 0.5 * (self.tf + self.t0)

    @property
    def duration(self) -> float:
        return self.tf - self.t0

    def control_at_nodes(self) -> np.ndarray:
        """Controls at all N+1 nodes, the last one from the interpolant."""
        return np.vstack([self.controls, self.grid.control_extrapolation() @ self.controls])

    def control_at(self, t) -> np.ndarray:
        """Piecewise-linear control between discretization nodes."""
        u = self.control_at_nodes()
        tn = self.times
        return np.array([np.interp(t, tn, u[:, j]) for j in range(u.shape[1])])

    def raw_at_nodes(self) -> np.ndarray:
        U = self.controls if self.raw_controls is None else self.raw_controls
        return np.vstack([U, self.grid.control_extrapolation() @ U])


@dataclass
class TrajectorySolution:
    phases: list
    objective: float
    solver: SolverResult
    config: MissionConfig

    @property
    def converged(self) -> bool:
        return self.solver.converged

    @property
    def final_mass(self) -> float:
        return float(self.phases[-1].states[-1, 6])

    @property
    def propellant(self) -> float:
        return float(self.phases[0].states[0, 6] - self.final_mass)

    @property
    def total_downrange(self) -> float:
        """Ground arc from the powered-descent start to the landing site, m."""
        x0 = self.phases[0].states[0]
        return float(self.config.constants.radius * (self.config.landing_latitude - x0[2]))

    def summary(self) -> dict:
        return {
            "status": self.solver.status,
            "iterations": self.solver.iterations,
            "final_mass_kg": self.final_mass,
            "propellant_kg": self.propellant,
            "downrange_m": self.total_downrange,
            "durations_s": [p.duration for p in self.phases],
        }


@dataclass
class PhaseWaypoint:
    name: str
    r0: np.ndarray
    v0: np.ndarray
    a0: np.ndarray
    rf: np.ndarray
    vf: np.ndarray
    af: np.ndarray
    duration: float
    m0: float
    mf: float


@dataclass
class WaypointSet:
    """Boundary triples per phase in the landing-site local frame.

    Position ``[downrange, altitude above terrain, crossrange]``, velocity
    ``[v, w, u]``; accelerations are thrust accelerations (gravity excluded).
    """

    phases: list

    def __getitem__(self, name) -> PhaseWaypoint:
        for p in self.phases:
            if p.name == name:
                return p
        raise KeyError(name)


# ---------------------------------------------------------------- problem
def _spherical_dynamics(X, U, t, params):
    return dyn.spherical_eom(X, U, params["constants"])


def _flat_dynamics(X, U, t, params):
    # the optimizer keeps mass above the floor through variable bounds
    return dyn.flat_eom_vector(X, U, params["constants"], check_mass=False)


def _thrust_magnitude(X, U, t, params):
    return np.linalg.norm(U, axis=1)[:, None]


def _attitude_hold(config: MissionConfig, state, thrust):
    return dyn.propagate_attitude_hold(state, thrust, config.constants,
                                       duration=config.attitude_hold_duration,
                                       alpha_deg=config.attitude_hold_alpha_deg,
                                       step=config.attitude_hold_step)


def _guess_durations(config):
    return config.duration_guess


def build_forward_pass(config: MissionConfig) -> MultiphaseProblem:
    """Declare the three-phase descent as a :class:`MultiphaseProblem`."""
    c = config.constants
    R = c.radius
    lat, lon = config.landing_latitude, config.landing_longitude
    params = {"constants": c}
    d1, d2, d3 = _guess_durations(config)
    half_pi = 0.5 * np.pi
    ctrl_lo = lambda p: [config.thrust_bounds(p)[0], -half_pi, -half_pi]
    ctrl_hi = lambda p: [config.thrust_bounds(p)[1], np.pi, half_pi]

    sph_scale = [1.0e4, 0.1, 0.1, 100.0, 100.0, 1000.0, 1000.0]
    sph_offset = [R, lon, lat, 0.0, 0.0, 0.0, 0.0]
    sph_lo = [R, lon - 1.0, lat - 1.5, -np.inf, -np.inf, -np.inf, c.dry_mass]
    sph_hi = [R + 2 * config.initial_altitude, lon + 1.0, lat + 0.2, np.inf, np.inf, np.inf,
              config.initial_mass]
    ctrl_scale = [1000.0, 1.0, 1.0]

    r0 = R + config.initial_altitude
    r1 = R + config.rough_braking_altitude
    r2 = config.site_radius + config.fine_braking_altitude
    v_exit = 0.8 * config.v_sops
    # arc-length guess: mean speed times duration per phase
    arc1 = 0.5 * (config.initial_velocity + v_exit) * d1
    arc_ah = v_exit * config.attitude_hold_duration
    arc2 = 0.5 * v_exit * d2
    phi2 = lat - arc2 / R
    phi1 = phi2 - arc_ah / R
    phi0 = phi1 - arc1 / R
    m0 = config.initial_mass
    m1 = m0 * math.exp(-(config.initial_velocity + 150.0) / c.exhaust_velocity)
    m2 = m1 * math.exp(-(v_exit + 150.0) / c.exhaust_velocity)
    m3 = m2 * math.exp(-(1.62 * d3) / c.exhaust_velocity)
    tb1 = config.thrust_bounds(0)[1]
    tb3 = config.thrust_bounds(2)

    def rb_boundary(x0, u0, t0, xf, uf, tf, p):
        return np.array([x0[0], x0[3], x0[4], x0[5], x0[6], xf[0], uf[1], uf[2], xf[5]])

    rb_lo = [r0, 0.0, 0.0, config.initial_velocity, m0, r1,
             math.radians(config.rough_braking_exit_alpha_deg), 0.0, -np.inf]
    rb_hi = rb_lo[:-1] + [config.v_sops]
    rb_scale = [1e4, 100.0, 100.0, 1000.0, 1000.0, 1e4, 1.0, 1.0, 1000.0]

    def fb_boundary(x0, u0, t0, xf, uf, tf, p):
        return np.array([u0[1], u0[2], xf[0], xf[1], xf[2], xf[3], xf[4], xf[5], uf[1], uf[2]])

    fb_val = [math.radians(config.attitude_hold_alpha_deg), 0.0, r2, lon, lat, 0.0, 0.0, 0.0, 0.0, 0.0]
    fb_scale = [1.0, 1.0, 1e4, 0.1, 0.1, 100.0, 100.0, 1000.0, 1.0, 1.0]

    def td_boundary(x0, u0, t0, xf, uf, tf, p):
        return np.asarray(xf[:6])

    rough = PhaseSpec(
        state_dim=7, control_dim=3, dynamics=_spherical_dynamics, n_collocation=config.collocation[0],
        mayer_cost=None, name=PHASE_NAMES[0],
        boundary_constraints=[BoundaryConstraint(rb_boundary, rb_lo, rb_hi, rb_scale)],
        state_lower=sph_lo, state_upper=sph_hi, control_lower=ctrl_lo(0), control_upper=ctrl_hi(0),
        t0_bounds=(0.0, 0.0), tf_bounds=config.duration_bounds[0],
        duration_bounds=config.duration_bounds[0],
        state_scale=sph_scale, state_offset=sph_offset, control_scale=ctrl_scale, time_scale=100.0,
        params=params,
        guess=PhaseGuess(0.0, d1, [r0, lon, phi0, 0.0, 0.0, config.initial_velocity, m0],
                         [r1, lon, phi1, -20.0, 0.0, v_exit, m1], control=[tb1, 1.2, 0.0]),
    )
    t2 = d1 + config.attitude_hold_duration
    big = 1e5
    fine = PhaseSpec(
        state_dim=7, control_dim=3, dynamics=_spherical_dynamics, n_collocation=config.collocation[1],
        name=PHASE_NAMES[1],
        boundary_constraints=[BoundaryConstraint(fb_boundary, fb_val, fb_val, fb_scale)],
        state_lower=sph_lo, state_upper=sph_hi, control_lower=ctrl_lo(1), control_upper=ctrl_hi(1),
        t0_bounds=(0.0, big), tf_bounds=(0.0, big), duration_bounds=config.duration_bounds[1],
        state_scale=sph_scale, state_offset=sph_offset, control_scale=ctrl_scale, time_scale=100.0,
        params=params,
        guess=PhaseGuess(t2, t2 + d2, [r1 - 300.0, lon, phi2, -20.0, 0.0, v_exit, m1],
                         [r2, lon, lat, 0.0, 0.0, 0.0, m2], control=[tb1, 0.5, 0.0]),
    )
    t3 = t2 + d2
    h3 = config.fine_braking_altitude
    flat_scale = [100.0, 100.0, 100.0, 10.0, 10.0, 10.0, 1000.0]
    terminal = PhaseSpec(
        state_dim=7, control_dim=3, dynamics=_flat_dynamics, n_collocation=config.collocation[2],
        mayer_cost=lambda x0, t0, xf, tf, p: -xf[6] / 1000.0, name=PHASE_NAMES[2],
        boundary_constraints=[BoundaryConstraint(td_boundary, [0.0] * 6, [0.0] * 6,
                                                 [100.0, 100.0, 100.0, 10.0, 10.0, 10.0])],
        state_lower=[-np.inf, 0.0, -np.inf, -np.inf, -np.inf, -np.inf, c.dry_mass],
        state_upper=[np.inf, 2 * h3, np.inf, np.inf, np.inf, np.inf, config.initial_mass],
        # thrust vector [downrange, up, crossrange] in N: with a vertical
        # thrust the yaw angle has no effect, which would leave the
        # (T, alpha, beta) parametrization singular here
        control_lower=[-tb3[1], 0.0, -tb3[1]], control_upper=[tb3[1]] * 3,
        path_constraints=[PathConstraint(_thrust_magnitude, [tb3[0]], [tb3[1]], 1000.0)],
        t0_bounds=(0.0, big), tf_bounds=(0.0, big), duration_bounds=config.duration_bounds[2],
        state_scale=flat_scale, control_scale=[1000.0] * 3, time_scale=100.0, params=params,
        guess=PhaseGuess(t3, t3 + d3, [0.0, h3, 0.0, 0.0, 0.0, 0.0, m2], [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, m3],
                         control=[0.0, 0.5 * (tb3[0] + tb3[1]), 0.0]),
    )

    # both linkages accept a leading batch axis (one row per FD perturbation)
    def link_hold(xf, uf, tf, x0, u0, t0):
        held = _attitude_hold(config, xf, uf[..., 0])
        dt = np.asarray(t0 - tf - config.attitude_hold_duration)[..., None]
        return np.concatenate([x0 - held, dt], axis=-1)

    def link_frame(xf, uf, tf, x0, u0, t0):
        local = dyn.spherical_to_local(xf, xf, c, terrain_elevation=config.terrain_elevation)
        return np.concatenate([x0 - local, np.asarray(t0 - tf)[..., None]], axis=-1)

    link_scale_sph = sph_scale + [100.0]
    link_scale_flat = flat_scale + [100.0]
    linkages = [
        LinkageSpec(0, 1, link_hold, [0.0] * 8, [0.0] * 8, link_scale_sph, vectorized=True),
        LinkageSpec(1, 2, link_frame, [0.0] * 8, [0.0] * 8, link_scale_flat, vectorized=True),
    ]
    return MultiphaseProblem([rough, fine, terminal], linkages)


def build_rough_braking(config: MissionConfig, target, downrange: float,
                        n_collocation: int | None = None, nominal=None) -> MultiphaseProblem:
    """Single-phase rough braking from orbit to a pinned terminal state.

    ``target`` is the spherical rough-braking exit state (mass free);
    the start lies ``downrange`` metres of ground arc before it in
    latitude, at a free longitude.  Terminal pitch and yaw are held as in
    the full problem.

    ``nominal = (times, states, controls)`` of a solved rough-braking arc
    seeds the guess: its time axis is stretched to the new downrange and
    its latitude history rescaled to end on the target.
    """
    c = config.constants
    R = c.radius
    xf = np.asarray(target, dtype=float)
    if not downrange > 0:
        raise ValueError("downrange must be positive")
    r0 = R + config.initial_altitude
    phi0 = xf[2] - downrange / R
    m0 = config.initial_mass
    lo_t, hi_t = config.thrust_bounds(0)
    v_end = math.hypot(xf[4], xf[5])
    d = float(np.clip(2.0 * downrange / (config.initial_velocity + v_end), *config.duration_bounds[0]))
    mf = m0 * math.exp(-(config.initial_velocity - v_end + 150.0) / c.exhaust_velocity)

    # the start longitude stays free, as in the full problem
    def boundary(x0, u0, t0, xf_, uf, tf, p):
        return np.concatenate([[x0[0], x0[2], x0[3], x0[4], x0[5], x0[6]], xf_[:6], [uf[1], uf[2]]])

    alpha = math.radians(config.rough_braking_exit_alpha_deg)
    val = [r0, phi0, 0.0, 0.0, config.initial_velocity, m0, *xf[:6], alpha, 0.0]
    scale = [1e4, 0.1, 100.0, 100.0, 1000.0, 1000.0, 1e4, 0.1, 0.1, 100.0, 100.0, 1000.0, 1.0, 1.0]
    half_pi = 0.5 * np.pi
    phase = PhaseSpec(
        state_dim=7, control_dim=3, dynamics=_spherical_dynamics,
        n_collocation=n_collocation or config.collocation[0],
        mayer_cost=lambda x0, t0, xf_, tf, p: -xf_[6] / 1000.0, name=PHASE_NAMES[0],
        boundary_constraints=[BoundaryConstraint(boundary, val, val, scale)],
        state_lower=[R, xf[1] - 1.0, phi0 - 0.2, -np.inf, -np.inf, -np.inf, c.dry_mass],
        state_upper=[R + 2 * config.initial_altitude, xf[1] + 1.0, xf[2] + 0.2, np.inf, np.inf, np.inf, m0],
        control_lower=[lo_t, -half_pi, -half_pi], control_upper=[hi_t, np.pi, half_pi],
        t0_bounds=(0.0, 0.0), tf_bounds=config.duration_bounds[0], duration_bounds=config.duration_bounds[0],
        state_scale=[1.0e4, 0.1, 0.1, 100.0, 100.0, 1000.0, 1000.0],
        state_offset=[R, xf[1], xf[2], 0.0, 0.0, 0.0, 0.0],
        control_scale=[1000.0, 1.0, 1.0], time_scale=100.0, params={"constants": c},
        guess=PhaseGuess(0.0, d, [r0, xf[1], phi0, 0.0, 0.0, config.initial_velocity, m0],
                         [*xf[:6], mf], control=[hi_t, 1.2, 0.0]),
    )
    if nominal is not None:
        phase.guess = _stretched_guess(nominal, xf, downrange, R)
    return MultiphaseProblem([phase])


def _stretched_guess(nominal, xf, downrange, R):
    tn, X, U = (np.asarray(a, dtype=float) for a in nominal)
    tn = tn - tn[0]
    k = downrange / (R * (X[-1, 2] - X[0, 2]))
    ts = tn * k
    Xs = X.copy()
    Xs[:, 2] = xf[2] - (X[-1, 2] - X[:, 2]) * k
    Xs[:, 1] += xf[1] - X[-1, 1]
    return PhaseGuess(0.0, float(ts[-1]), Xs[0], Xs[-1],
                      state_fn=lambda t: np.array([np.interp(t, ts, Xs[:, j]) for j in range(Xs.shape[1])]),
                      control_fn=lambda t: np.array([np.interp(t, ts[:len(U)], U[:, j]) for j in range(U.shape[1])]))


def solve_rough_braking(config: MissionConfig, target, downrange: float,
                        options: SolverOptions | None = None, n_collocation: int | None = None, nominal=None):
    """Solve :func:`build_rough_braking`; returns ``(PhaseTrajectory, SolverResult)``."""
    tr = Transcription(build_rough_braking(config, target, downrange, n_collocation, nominal))
    result = solve(tr.to_nlp(), options or SolverOptions(max_iterations=150))
    v = tr.layout.unpack(result.z)[0]
    traj = PhaseTrajectory(PHASE_NAMES[0], tr.grids[0], v.states, v.controls, v.t0, v.tf, "spherical")
    return traj, result


def solve_forward_pass(config: MissionConfig, options: SolverOptions | None = None,
                       warm_start: TrajectorySolution | None = None) -> TrajectorySolution:
    """Transcribe and solve the forward pass.

    The solve runs first on a coarse grid (a third of the requested
    collocation counts, at least 6) whose solution seeds the full problem.
    A ``warm_start`` solution replaces that coarse stage.
    """
    options = options or SolverOptions(max_iterations=400)
    if warm_start is None and max(config.collocation) > 12:
        coarse_cfg = replace(config, collocation=tuple(max(6, n // 3) for n in config.collocation))
        coarse_opt = replace(options, kkt_tolerance=max(options.kkt_tolerance, 1e-5),
                             constraint_tolerance=max(options.constraint_tolerance, 1e-7),
                             log_file=None)
        warm_start = _solve(coarse_cfg, coarse_opt, None)
    return _solve(config, options, warm_start)


def _solve(config, options, warm_start):
    problem = build_forward_pass(config)
    if warm_start is not None:
        _seed_from(problem, warm_start)
    tr = Transcription(problem)
    nlp = tr.to_nlp()
    result = solve(nlp, options)
    return _package(config, tr, result)


def _seed_from(problem: MultiphaseProblem, sol: TrajectorySolution):
    for ph, prev in zip(problem.phases, sol.phases):
        tn = prev.times
        X = prev.states
        U = prev.raw_at_nodes()
        ph.guess = PhaseGuess(
            prev.t0, prev.tf, X[0], X[-1],
            state_fn=lambda t, tn=tn, X=X: np.array([np.interp(t, tn, X[:, j]) for j in range(X.shape[1])]),
            control_fn=lambda t, tn=tn, U=U: np.array([np.interp(t, tn, U[:, j]) for j in range(U.shape[1])]),
        )


def _package(config, tr: Transcription, result: SolverResult) -> TrajectorySolution:
    values = tr.layout.unpack(result.z)
    phases = []
    for i, (v, grid) in enumerate(zip(values, tr.grids)):
        if i == 2:
            phases.append(PhaseTrajectory(PHASE_NAMES[i], grid, v.states, dyn.body_thrust_from_vector(v.controls),
                                          v.t0, v.tf, "local", raw_controls=v.controls))
        else:
            phases.append(PhaseTrajectory(PHASE_NAMES[i], grid, v.states, v.controls, v.t0, v.tf, "spherical"))
    objective = float(result.objective) if np.isfinite(result.objective) else np.nan
    return TrajectorySolution(phases=phases, objective=objective, solver=result, config=config)


def boundary_residuals(solution: TrajectorySolution) -> dict:
    """Scaled residuals of every boundary and linkage row of the solved problem."""
    cfg = solution.config
    problem = build_forward_pass(cfg)
    out = {}
    for p, (ph, traj) in enumerate(zip(problem.phases, solution.phases)):
        U = traj.raw_at_nodes()
        for con in ph.boundary_constraints:
            val = con.fn(traj.states[0], U[0], traj.t0, traj.states[-1], U[-1], traj.tf, ph.params)
            lo, hi = np.asarray(con.lower, float), np.asarray(con.upper, float)
            viol = np.maximum(lo - val, 0) + np.maximum(val - hi, 0)
            out[ph.name] = viol / np.asarray(con.scale, float)
    for link in problem.linkages:
        a, b = solution.phases[link.left], solution.phases[link.right]
        val = link.fn(a.states[-1], a.raw_at_nodes()[-1], a.tf, b.states[0], b.raw_at_nodes()[0], b.t0)
        out[f"{a.name}->{b.name}"] = np.abs(val) / np.asarray(link.scale, float)
    return out


# --------------------------------------------------------------- waypoints
def _thrust_accel(control, mass):
    up, down, cross = dyn.thrust_components(control[0], control[1], control[2])
    return np.array([down, up, cross]) / mass


def extract_waypoints(solution: TrajectorySolution) -> WaypointSet:
    """Boundary position, velocity and thrust acceleration of each phase.

    Braking-phase states are mapped into the landing-site frame, so the
    fine-braking terminal waypoint is ``[0, 800 m, 0]`` at rest.
    """
    cfg = solution.config
    c = cfg.constants
    ref = cfg.site_reference()
    out = []
    for traj in solution.phases:
        U = traj.control_at_nodes()
        if traj.frame == "spherical":
            loc0 = dyn.spherical_to_local(traj.states[0], ref, c, cfg.terrain_elevation)
            locf = dyn.spherical_to_local(traj.states[-1], ref, c, cfg.terrain_elevation)
        else:
            loc0, locf = traj.states[0], traj.states[-1]
        out.append(PhaseWaypoint(
            name=traj.name, r0=loc0[:3].copy(), v0=loc0[3:6].copy(),
            a0=_thrust_accel(U[0], traj.states[0, 6]), rf=locf[:3].copy(), vf=locf[3:6].copy(),
            af=_thrust_accel(U[-1], traj.states[-1, 6]), duration=traj.duration,
            m0=float(traj.states[0, 6]), mf=float(traj.states[-1, 6])))
    return WaypointSet(out)


# -------------------------------------------------------------- verification
def _phase_eom(traj: PhaseTrajectory, constants):
    if traj.frame == "spherical":
        return lambda t, x, u: dyn.spherical_eom(x, u, constants)
    if traj.control_mode == "vector":
        return lambda t, x, u: dyn.flat_eom_vector(x, u, constants)
    return lambda t, x, u: dyn.flat_eom_body(x, u, constants)


def _scale_thrust(u, mode, factor):
    if mode == "vector":
        return u * factor
    u[0] *= factor
    return u


def _control_fn(traj: PhaseTrajectory, interpolation: str):
    U = traj.raw_at_nodes()
    tn = traj.times
    if interpolation == "linear":
        return lambda t: np.array([np.interp(t, tn, U[:, j]) for j in range(U.shape[1])])
    if interpolation != "lagrange":
        raise ValueError(f"unknown interpolation '{interpolation}'")

    def control(t):
        tau = min(1.0, max(-1.0, (2 * t - traj.t0 - traj.tf) / (traj.tf - traj.t0)))
        return np.asarray(traj.grid.interpolate(U, tau), float)
    return control


def repropagate_phase(traj: PhaseTrajectory, constants, step: float = 0.05, thrust_factor: float = 1.0,
                      interpolation: str = "lagrange"):
    """RK4 re-propagation of one phase from its initial node with interpolated controls.

    ``"lagrange"`` uses the collocation interpolant of the controls (the
    representation the defects were solved for); ``"linear"`` joins the
    node values with straight lines.
    """
    fn = _control_fn(traj, interpolation)
    mode = traj.control_mode

    def control(t, x):
        return _scale_thrust(fn(t), mode, thrust_factor)
    eom = _phase_eom(traj, constants)
    return dyn.propagate(eom, traj.states[0], control, traj.duration, step, traj.t0)


STATE_SCALES = {
    "spherical": np.array([1.0e4, 0.1, 0.1, 100.0, 100.0, 1000.0, 1000.0]),
    "local": np.array([100.0, 100.0, 100.0, 10.0, 10.0, 10.0, 1000.0]),
}


def verify_solution(solution: TrajectorySolution, config: MissionConfig | None = None,
                    step: float = 0.05, thrust_factor: float = 1.0, interpolation: str = "lagrange") -> dict:
    """Independent RK re-propagation of every phase.

    Reports per phase the terminal mismatch relative to the state scales,
    the thrust-bound violation and the mass bookkeeping error (collocated
    mass drop versus the trapezoid integral of ``T / (Isp g0)``).
    """
    cfg = config or solution.config
    c = cfg.constants
    report = {"phases": [], "ok": True}
    for i, traj in enumerate(solution.phases):
        res = repropagate_phase(traj, c, step, thrust_factor, interpolation)
        scale = STATE_SCALES[traj.frame]
        mismatch = np.abs(res.final - traj.states[-1]) / scale
        lo, hi = cfg.thrust_bounds(i)
        T = traj.controls[:, 0]
        bound_viol = float(max(np.max(lo - T), np.max(T - hi), 0.0))
        tt = res.times
        fn = _control_fn(traj, interpolation)
        Ut = np.array([fn(t) for t in tt])
        thrust = (np.linalg.norm(Ut, axis=1) if traj.control_mode == "vector" else Ut[:, 0]) * thrust_factor
        burned = float(np.sum(0.5 * (thrust[1:] + thrust[:-1]) * np.diff(tt)) / c.exhaust_velocity)
        collocated = float(traj.states[0, 6] - traj.states[-1, 6])
        entry = {
            "name": traj.name,
            "terminal_mismatch": mismatch.tolist(),
            "max_mismatch": float(mismatch.max()),
            "thrust_bound_violation": bound_viol,
            "mass_bookkeeping_error": abs(burned - collocated) / max(collocated, 1e-9),
        }
        entry["ok"] = entry["max_mismatch"] < 1e-3 and bound_viol < 1e-6 * hi
        report["ok"] &= entry["ok"]
        report["phases"].append(entry)
    return report
