"""Stage orchestration: optimize -> dataset -> classify -> refine, plus terminal.

Each stage reads the files written by the stages it depends on, so a run
can be resumed stage by stage in the same output directory.  The manifest
records what every stage wrote, how long it took and whether its solver
converged.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import dynamics as dyn
from . import io
from .config import RunConfig, dumps_config
from .controllability import (ClassificationDataset, ConicBoundary, ConvexityError, GuidanceDataset,
                              InfeasibleRefinementError, RefinementConfig, build_datasets, fit_conic_boundary, fit_dm_surrogate,
                              fit_policy, margin_sigma, reduced_coordinates, rough_braking_line_search,
                              sample_dispersions, trace_tradeoff)
from .guidance import GuidanceBoundary, PolynomialSurrogate, RankDeficiencyError, tgo_grid
from .mission import PHASE_NAMES, boundary_residuals, extract_waypoints, solve_forward_pass, verify_solution
from .terminal import TerminalSequenceError, simulate_terminal_sequence

log = logging.getLogger(__name__)

STAGES = ("optimize", "dataset", "classify", "refine", "terminal")
DEPENDS = {
    "optimize": (),
    "dataset": ("optimize",),
    "classify": ("dataset",),
    "refine": ("optimize", "dataset", "classify"),
    "terminal": ("optimize",),
}
# files each stage must leave behind for its dependants
PRODUCES = {
    "optimize": ("waypoints.json", "trajectory_rough_braking.csv"),
    "dataset": ("dataset.csv",),
    "classify": ("conic.json", "surrogates.json"),
    "refine": ("tradeoff.csv",),
    "terminal": ("terminal_trajectory.csv",),
}


class MissingArtifactError(ValueError):
    """A stage was asked to run before the stage that feeds it."""


class StageFailure(RuntimeError):
    """A stage could not produce a usable result (solver or fit failure)."""


@dataclass
class StageRecord:
    name: str
    files: list
    seconds: float
    status: str  # "ok", "not-converged" or "failed"
    notes: dict = field(default_factory=dict)


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    version: str
    stages: dict = field(default_factory=dict)  # name -> StageRecord

    @property
    def converged(self) -> bool:
        return all(r.status == "ok" for r in self.stages.values())

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash, "seed": self.seed, "version": self.version,
            "stages": {k: {"files": r.files, "seconds": r.seconds, "status": r.status, "notes": r.notes}
                       for k, r in self.stages.items()},
        }

    @classmethod
    def from_dict(cls, d) -> "RunManifest":
        stages = {k: StageRecord(k, v["files"], v["seconds"], v["status"], v.get("notes", {}))
                  for k, v in d.get("stages", {}).items()}
        return cls(d["config_hash"], int(d["seed"]), d["version"], stages)


def _require(out: Path, stage: str):
    for dep in DEPENDS[stage]:
        for name in PRODUCES[dep]:
            if not (out / name).is_file():
                raise MissingArtifactError(f"stage '{stage}' needs {name}; run stage '{dep}' first")


# ------------------------------------------------------------------ stages
def _stage_optimize(cfg: RunConfig, out: Path):
    m = cfg.mission
    sol = solve_forward_pass(m, cfg.solver.options())
    files = []
    for traj in sol.phases:
        files.append(io.write_trajectory(out / f"trajectory_{traj.name}.csv", io.phase_rows(traj, m)))
    wps = extract_waypoints(sol)
    rb = sol.phases[0]
    waypoints = {
        "phases": {w.name: {k: getattr(w, k) for k in ("r0", "v0", "a0", "rf", "vf", "af", "duration",
                                                        "m0", "mf")} for w in wps.phases},
        "fine_braking_start_spherical": sol.phases[1].states[0],
        "attitude_hold_thrust_N": float(rb.raw_at_nodes()[-1, 0]),
        "rough_braking_downrange_m": float(m.constants.radius * (rb.states[-1, 2] - rb.states[0, 2])),
    }
    files.append(io.write_json(out / "waypoints.json", waypoints))
    residuals = boundary_residuals(sol)
    report = verify_solution(sol)
    summary = {"solution": sol.summary(), "boundary_residual_max": {k: float(np.max(v)) for k, v in residuals.items()},
               "verification": report}
    files.append(io.write_json(out / "forward_summary.json", summary))
    status = "ok" if sol.converged else "not-converged"
    return files, status, {"solver_status": sol.solver.status, "final_mass_kg": sol.final_mass}


def _fine_braking(out: Path):
    wp = io.read_json(out / "waypoints.json")["phases"][PHASE_NAMES[1]]
    arr = {k: np.asarray(wp[k], dtype=float) for k in ("r0", "v0", "a0", "rf", "vf", "af")}
    boundary = GuidanceBoundary(arr["r0"], arr["v0"], arr["a0"], arr["rf"], arr["vf"], arr["af"])
    mean = np.concatenate([arr["r0"], arr["v0"], [wp["m0"]]])
    return boundary, mean


def _rollout_kwargs(cfg: RunConfig):
    g = cfg.guidance
    return dict(period=g.period, pos_tol=g.position_tolerance, vel_tol=g.velocity_tolerance)


def _stage_dataset(cfg: RunConfig, out: Path):
    boundary, mean = _fine_braking(out)
    model = cfg.dispersion.model(mean, cfg.seed)
    X = sample_dispersions(model)
    grid = tgo_grid(cfg.guidance.t_go_min, cfg.guidance.t_go_max, cfg.guidance.t_go_step)
    D, T = build_datasets(X, boundary, grid, cfg.mission.constants, cfg.mission.thrust_bounds(1),
                          **_rollout_kwargs(cfg))
    tgo = np.full(len(X), np.nan)
    dm = np.full(len(X), np.nan)
    ok = T.labels > 0
    tgo[ok], dm[ok] = D.t_go, D.dm
    rows = np.column_stack([X, T.labels, T.reduced, tgo, dm])
    files = [io.write_csv(out / "dataset.csv", io.DATASET_COLUMNS, rows)]
    notes = {"samples": len(X), "controllable": int(ok.sum()), "excluded": T.excluded}
    return files, "ok", notes


def _load_dataset(out: Path):
    _, rows = io.read_csv(out / "dataset.csv")
    X = rows[:, :7]
    labels = rows[:, 7].astype(int)
    ok = labels > 0
    T = ClassificationDataset(states=X, labels=labels, reduced=reduced_coordinates(X))
    D = GuidanceDataset(states=X[ok], t_go=rows[ok, 10], dm=rows[ok, 11])
    return D, T


def _stage_classify(cfg: RunConfig, out: Path):
    D, T = _load_dataset(out)
    labels = T.labels[T.valid]
    if not (np.any(labels > 0) and np.any(labels < 0)):
        raise StageFailure("dataset has a single label; widen the dispersions or the t_go range")
    try:
        conic = fit_conic_boundary(T, C=cfg.classifier.C, iterations=cfg.classifier.iterations, seed=cfg.seed)
    except ConvexityError as exc:
        raise StageFailure(str(exc)) from exc
    sigma = margin_sigma(conic, T)
    a, b, c, d, e, f = conic.coefficients
    files = [io.write_json(out / "conic.json", {
        "a": a, "b": b, "c": c, "d": d, "e": e, "f": f, "inside_positive": conic.inside_positive,
        "training_accuracy": conic.training_accuracy, "margin_sigma": sigma, "excluded_samples": T.excluded,
        "discriminant": conic.discriminant})]
    surrogates = {"dm": fit_dm_surrogate(D).to_dict(), "dm_std": float(np.std(D.dm, ddof=1))}
    try:
        surrogates["tgo_policy"] = fit_policy(D).to_dict()
    except RankDeficiencyError as exc:  # e.g. t_go* pinned at one grid value
        surrogates["tgo_policy"] = None
        surrogates["tgo_policy_error"] = str(exc)
    files.append(io.write_json(out / "surrogates.json", surrogates))
    return files, "ok", {"training_accuracy": conic.training_accuracy, "sigma": sigma}


def _refinement_config(cfg: RunConfig, mean, sigma, dm_scale) -> RefinementConfig:
    r = cfg.refinement
    S, H, v, w = mean[0], mean[1], mean[3], mean[4]
    return RefinementConfig(
        lam=0.0, H=float(H), S_bounds=(S - r.S_halfwidth, S + r.S_halfwidth),
        v_bounds=(v - r.v_halfwidth, v + r.v_halfwidth), w_bounds=(w - r.w_halfwidth, w + r.w_halfwidth),
        v_sops=cfg.mission.v_sops, dm_max=math.inf if r.dm_max is None else r.dm_max, sigma=sigma,
        dm_scale=dm_scale if dm_scale > 0 else 1.0, starts_per_axis=r.starts_per_axis)


def _stage_refine(cfg: RunConfig, out: Path):
    cj = io.read_json(out / "conic.json")
    conic = ConicBoundary([cj[k] for k in "abcdef"], cj["inside_positive"], cj["training_accuracy"] or math.nan)
    sj = io.read_json(out / "surrogates.json")
    surrogate = PolynomialSurrogate.from_dict(sj["dm"])
    boundary, mean = _fine_braking(out)
    dm_scale = sj.get("dm_std") or 1.0
    rcfg = _refinement_config(cfg, mean, cj["margin_sigma"], dm_scale)
    lams = np.linspace(0.0, 1.0, cfg.refinement.n_lambda)
    curve = trace_tradeoff(conic, surrogate, lams, rcfg)
    rows = [[e.lam, e.waypoint.S, e.waypoint.v, e.waypoint.w, e.waypoint.margin, e.waypoint.dm] if e.feasible
            else [e.lam] + [np.nan] * 5 for e in curve.entries]
    files = [io.write_csv(out / "tradeoff.csv", io.TRADEOFF_COLUMNS, rows)]
    if not any(e.feasible for e in curve.entries):
        raise StageFailure("no feasible refined waypoint for any weight")

    grid = tgo_grid(cfg.guidance.t_go_min, cfg.guidance.t_go_max, cfg.guidance.t_go_step)
    checks = []
    for k, level in enumerate(cfg.refinement.margin_levels):
        entry = curve.at_margin(float(level))
        wp = entry.waypoint
        item = {"target_margin_sigma": level, "lambda": entry.lam, "S_m": wp.S, "H_m": wp.H, "v_mps": wp.v,
                "w_mps": wp.w, "margin_sigma": wp.margin, "dm_kg": wp.dm}
        n = cfg.refinement.verification_samples
        if n > 0:
            model = cfg.dispersion.model(wp.state(mean), cfg.seed + 1000 + k)
            X = sample_dispersions(model, n=n)
            _, T = build_datasets(X, boundary, grid, cfg.mission.constants, cfg.mission.thrust_bounds(1),
                                  **_rollout_kwargs(cfg))
            item["fresh_samples"] = n
            item["success_rate"] = float(np.mean(T.labels > 0))
        checks.append(item)
    summary = {"waypoints": checks, "sigma": cj["margin_sigma"], "dm_scale_kg": rcfg.dm_scale}
    notes = {}
    status = "ok"

    ls = cfg.line_search
    if ls.enabled:
        wj = io.read_json(out / "waypoints.json")
        m = cfg.mission
        refined = curve.at_margin(float(max(cfg.refinement.margin_levels))).waypoint.state(mean)
        fine_start = dyn.local_to_spherical(refined, m.site_reference(), m.constants, m.terrain_elevation)
        arc = wj["rough_braking_downrange_m"]
        lo = max(ls.step, arc - ls.halfwidth)
        _, rows = io.read_csv(out / f"trajectory_{PHASE_NAMES[0]}.csv")
        sph = dyn.local_to_spherical(rows[:, 1:8], m.site_reference(), m.constants, m.terrain_elevation)
        nominal = (rows[:, 0], sph, rows[:-1, 8:11])
        try:
            sel = rough_braking_line_search(
                m, fine_start, wj["attitude_hold_thrust_N"], (lo, arc + ls.halfwidth), ls.step,
                cfg.solver.options(max_iterations=ls.max_iterations), n_collocation=ls.n_collocation,
                feasibility_tolerance=ls.feasibility_tolerance, nominal=nominal)
            files.append(io.write_csv(out / "rough_braking_search.csv", io.LINE_SEARCH_COLUMNS, sel.as_table()))
            summary["rough_braking"] = {"downrange_m": sel.downrange, "dm_kg": sel.selected.dm,
                                        "margin_m": sel.selected.margin}
        except InfeasibleRefinementError as exc:
            summary["rough_braking"] = {"error": str(exc)}
            status = "not-converged"
            notes["rough_braking"] = str(exc)
    files.append(io.write_json(out / "refine_summary.json", summary))
    return files, status, notes


def _stage_terminal(cfg: RunConfig, out: Path):
    wp = io.read_json(out / "waypoints.json")["phases"][PHASE_NAMES[2]]
    start = np.array([0.0, cfg.mission.fine_braking_altitude, 0.0, 0.0, 0.0, 0.0, wp["m0"]])
    status = "ok"
    notes = {}
    try:
        traj = simulate_terminal_sequence(start, cfg.terminal, cfg.mission.constants)
    except TerminalSequenceError as exc:
        traj = exc.trajectory
        status = "failed"
        notes["error"] = str(exc)
    files = []
    if traj.segments:
        table = traj.as_table()
        rows = io.local_trajectory_rows(table[:, 0], table[:, 1:8], traj.thrust_vectors())
        files.append(io.write_trajectory(out / "terminal_trajectory.csv", rows))
        start_row = np.cumsum([0] + [len(s.times) for s in traj.segments[:-1]])
        summary = {
            "segments": [{"label": s.label, "first_row": int(r), "rows": len(s.times), "duration_s": s.duration,
                          "t_go_s": s.t_go, "propellant_kg": s.propellant}
                         for s, r in zip(traj.segments, start_row)],
            "touchdown": traj.touchdown, "lateral_error_m": traj.lateral_error,
            "total_propellant_kg": traj.total_propellant, "site": traj.site,
        }
        files.append(io.write_json(out / "terminal_summary.json", summary))
    if status != "ok":
        raise StageFailure(notes["error"])
    return files, status, notes


RUNNERS = {"optimize": _stage_optimize, "dataset": _stage_dataset, "classify": _stage_classify,
           "refine": _stage_refine, "terminal": _stage_terminal}


def run_pipeline(config: RunConfig, stage: str = "all", out_dir=".") -> RunManifest:
    """Run one stage or ``all`` into ``out_dir`` and update its manifest.

    Raises :class:`MissingArtifactError` when an upstream file is absent and
    :class:`StageFailure` when a stage cannot produce its outputs (the
    manifest is written first in both cases).
    """
    if stage != "all" and stage not in STAGES:
        raise ValueError(f"unknown stage '{stage}'; choose from {', '.join(STAGES)} or all")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mpath = out / "manifest.json"
    digest = config.digest()
    manifest = RunManifest(digest, config.seed, __version__)
    if mpath.is_file():
        old = RunManifest.from_dict(io.read_json(mpath))
        if old.config_hash == digest:
            manifest.stages = old.stages
    (out / "config.json").write_text(dumps_config(config) + "\n")

    for name in (STAGES if stage == "all" else (stage,)):
        _require(out, name)
        log.info("stage %s", name)
        t0 = time.perf_counter()
        try:
            files, status, notes = RUNNERS[name](config, out)
        except StageFailure as exc:
            manifest.stages[name] = StageRecord(name, [], time.perf_counter() - t0, "failed", {"error": str(exc)})
            io.write_json(mpath, manifest.to_dict())
            raise
        manifest.stages[name] = StageRecord(name, sorted(Path(f).name for f in files),
                                            time.perf_counter() - t0, status, notes)
        io.write_json(mpath, manifest.to_dict())
        log.info("stage %s: %s in %.1f s", name, status, manifest.stages[name].seconds)
    return manifest
