"""Run configuration: JSON schema, defaults and validation.

A config file is a JSON object whose top-level keys are the sections
below; every key is optional and missing keys take the documented
defaults.  Unknown keys and wrongly typed values are rejected with an
error naming the offending key.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controllability import DispersionModel
from .dynamics import MoonConstants
from .mission import MissionConfig
from .sqp import SolverOptions
from .terminal import TerminalSequenceConfig


class ConfigError(ValueError):
    """Schema or value violation in a configuration document."""


@dataclass
class SolverSettings:
    kkt_tolerance: float = 1e-6
    constraint_tolerance: float = 1e-8
    max_iterations: int = 500
    hessian_floor: float = 1e-3
    time_limit: float | None = None  # s; makes results timing dependent

    def options(self, max_iterations: int | None = None, **kw) -> SolverOptions:
        return SolverOptions(kkt_tolerance=self.kkt_tolerance, constraint_tolerance=self.constraint_tolerance,
                             max_iterations=max_iterations or self.max_iterations,
                             hessian_floor=self.hessian_floor, time_limit=self.time_limit, **kw)


@dataclass
class GuidanceSettings:
    t_go_min: float = 150.0  # s
    t_go_max: float = 500.0  # s
    t_go_step: float = 1.0  # s
    period: float = 0.1  # s
    position_tolerance: float = 1.0  # m
    velocity_tolerance: float = 0.1  # m/s

    def __post_init__(self):
        if not 0 < self.t_go_min < self.t_go_max:
            raise ValueError("need 0 < t_go_min < t_go_max")
        if min(self.t_go_step, self.period, self.position_tolerance, self.velocity_tolerance) <= 0:
            raise ValueError("steps and tolerances must be positive")


@dataclass
class DispersionSettings:
    position_std: float = 500.0  # m, S and H
    velocity_std: float = 10.0  # m/s, w and v
    covariance: list | None = None  # full 4x4 over (S, H, w, v); overrides the stds
    mass_std: float = 0.0  # kg
    n_samples: int = 2000

    def __post_init__(self):
        if self.position_std < 0 or self.velocity_std < 0 or self.mass_std < 0:
            raise ValueError("standard deviations must be non-negative")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def model(self, mean, seed: int) -> DispersionModel:
        if self.covariance is not None:
            return DispersionModel(mean, np.array(self.covariance, dtype=float), self.mass_std,
                                   self.n_samples, seed)
        return DispersionModel.diagonal(mean, self.position_std, self.velocity_std,
                                        mass_std=self.mass_std, n_samples=self.n_samples, seed=seed)


@dataclass
class ClassifierSettings:
    C: float = 10.0
    iterations: int = 100_000

    def __post_init__(self):
        if self.C <= 0 or self.iterations < 1:
            raise ValueError("C must be positive and iterations >= 1")


@dataclass
class RefinementSettings:
    n_lambda: int = 21
    S_halfwidth: float = 2000.0  # m around the nominal waypoint
    v_halfwidth: float = 30.0  # m/s
    w_halfwidth: float = 30.0  # m/s
    dm_max: float | None = None  # kg; None means unbounded
    starts_per_axis: int = 3
    margin_levels: list = field(default_factory=lambda: [1.0, 3.0])  # sigma, fresh-sample checks
    verification_samples: int = 2000

    def __post_init__(self):
        if self.n_lambda < 2:
            raise ValueError("n_lambda must be >= 2")
        if min(self.S_halfwidth, self.v_halfwidth, self.w_halfwidth) <= 0:
            raise ValueError("search half-widths must be positive")
        if self.starts_per_axis < 1 or self.verification_samples < 0:
            raise ValueError("starts_per_axis >= 1 and verification_samples >= 0 required")


@dataclass
class LineSearchSettings:
    enabled: bool = True
    halfwidth: float = 50_000.0  # m of downrange around the nominal rough-braking arc
    step: float = 25_000.0  # m
    n_collocation: int = 10
    max_iterations: int = 300
    feasibility_tolerance: float = 1e-5  # scaled constraint violation accepted as feasible

    def __post_init__(self):
        if self.halfwidth < 0 or self.step <= 0 or self.n_collocation < 1 or self.max_iterations < 1:
            raise ValueError("invalid rough-braking line-search settings")


@dataclass
class RunConfig:
    seed: int = 0
    mission: MissionConfig = field(default_factory=MissionConfig)
    solver: SolverSettings = field(default_factory=SolverSettings)
    guidance: GuidanceSettings = field(default_factory=GuidanceSettings)
    dispersion: DispersionSettings = field(default_factory=DispersionSettings)
    classifier: ClassifierSettings = field(default_factory=ClassifierSettings)
    refinement: RefinementSettings = field(default_factory=RefinementSettings)
    line_search: LineSearchSettings = field(default_factory=LineSearchSettings)
    terminal: TerminalSequenceConfig = field(default_factory=TerminalSequenceConfig)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        return hashlib.sha256(dumps_config(self).encode()).hexdigest()


# ------------------------------------------------------------ conversion
def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(value, tp, key):
    """Check ``value`` against annotation ``tp``; returns the converted value."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, key)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(f"{key}: expected {' or '.join(_type_name(a) for a in args)}, "
                          f"got {type(value).__name__}")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected an object, got {type(value).__name__}")
        return _build(tp, value, key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {type(value).__name__}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {type(value).__name__}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {type(value).__name__}")
        return float(value)
    if tp in (tuple, list) or origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected array, got {type(value).__name__}")
        return tuple(value) if (tp is tuple or origin is tuple) else list(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {type(value).__name__}")
        return value
    return value


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigError(f"{path}: unknown key")
        kwargs[key] = _coerce(value, hints[key], path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object at the top level")
    return _build(RunConfig, data)


def config_to_dict(config: RunConfig) -> dict:
    return _plain(config)


def dumps_config(config: RunConfig) -> str:
    return json.dumps(config_to_dict(config), indent=2, sort_keys=True)


def load_config(path) -> RunConfig:
    """Read a JSON config; all defaults applied, unknown keys rejected."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(dumps_config(config) + "\n")


__all__ = ["ConfigError", "RunConfig", "SolverSettings", "GuidanceSettings", "DispersionSettings",
           "ClassifierSettings", "RefinementSettings", "LineSearchSettings", "MoonConstants",
           "config_from_dict", "config_to_dict", "dumps_config", "load_config", "save_config"]
