"""Plain-text result files: CSV with a one-line unit-bearing header, JSON.

Numbers are written with a fixed ``%.12g`` format so that identical
results give byte-identical files.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import dynamics as dyn

TRAJECTORY_COLUMNS = ("t_s", "downrange_m", "altitude_m", "crossrange_m", "v_mps", "w_mps", "u_mps",
                      "mass_kg", "thrust_N", "alpha_rad", "beta_rad")
TRADEOFF_COLUMNS = ("lambda", "S_m", "v_mps", "w_mps", "margin_sigma", "dm_kg")
DATASET_COLUMNS = ("S_m", "H_m", "crossrange_m", "v_mps", "w_mps", "u_mps", "mass_kg", "label",
                   "s1_s", "s2_s", "tgo_opt_s", "dm_kg")
LINE_SEARCH_COLUMNS = ("downrange_m", "feasible", "dm_kg", "margin_m")

FLOAT_FORMAT = "%.12g"


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    out = FLOAT_FORMAT % v
    return "0" if out == "-0" else out


def write_csv(path, columns, rows) -> Path:
    """Write ``rows`` (2-D array-like) under a header of ``columns``."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float)) if len(rows) else np.empty((0, len(columns)))
    if rows.shape[1] != len(columns):
        raise ValueError(f"{len(columns)} columns declared but rows have {rows.shape[1]}")
    lines = [",".join(columns)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    p = Path(path)
    p.write_text("\n".join(lines) + "\n")
    return p


def read_csv(path):
    """Returns ``(columns, rows)``; ``rows`` is a float array (nan kept)."""
    p = Path(path)
    with p.open() as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        data = np.empty((0, len(header)))
    return header, data


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def write_json(path, data) -> Path:
    p = Path(path)
    p.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")
    return p


def read_json(path):
    return json.loads(Path(path).read_text())


# ------------------------------------------------------------ trajectories
def local_trajectory_rows(times, states, force) -> np.ndarray:
    """Trajectory rows from local states and thrust vectors ``[down, up, cross]`` (N)."""
    body = dyn.body_thrust_from_vector(np.asarray(force, dtype=float))
    return np.column_stack([times, states[:, :7], body])


def phase_rows(traj, config) -> np.ndarray:
    """Trajectory rows of a solved phase, expressed in the landing-site frame."""
    X = traj.states
    if traj.frame == "spherical":
        X = dyn.spherical_to_local(X, config.site_reference(), config.constants, config.terrain_elevation)
    U = traj.control_at_nodes()
    return np.column_stack([traj.times, X, U])


def write_trajectory(path, rows) -> Path:
    return write_csv(path, TRAJECTORY_COLUMNS, rows)
