"""Powered-descent trajectory design toolkit.

Forward pass by Radau collocation and SQP, polynomial closed-loop
guidance, controllability-based waypoint refinement and a scripted
terminal-descent simulation.
"""
__version__ = "0.1.0"

from .dynamics import LocalState, MoonConstants, SphericalState  # noqa: E402
from .lgr import LGRGrid, lgr_grid  # noqa: E402
from .sqp import SolverOptions, SolverResult, solve  # noqa: E402
from .mission import MissionConfig, TrajectorySolution, extract_waypoints, solve_forward_pass  # noqa: E402
from .guidance import (GuidanceBoundary, closed_loop_rollout, grid_search_tgo,  # noqa: E402
                       solve_coeffs)
from .controllability import (ConicBoundary, DispersionModel, build_datasets,  # noqa: E402
                              fit_conic_boundary, refine_waypoint, robustness_margin, trace_tradeoff)
from .terminal import TerminalSequenceConfig, hover_thrust, simulate_terminal_sequence  # noqa: E402
from .config import RunConfig, load_config  # noqa: E402
from .pipeline import run_pipeline  # noqa: E402

__all__ = [
    "LocalState", "MoonConstants", "SphericalState", "LGRGrid", "lgr_grid", "SolverOptions", "SolverResult",
    "solve", "MissionConfig", "TrajectorySolution", "extract_waypoints", "solve_forward_pass",
    "GuidanceBoundary", "closed_loop_rollout", "grid_search_tgo", "solve_coeffs", "ConicBoundary",
    "DispersionModel", "build_datasets", "fit_conic_boundary", "refine_waypoint", "robustness_margin",
    "trace_tradeoff", "TerminalSequenceConfig", "hover_thrust", "simulate_terminal_sequence", "RunConfig",
    "load_config", "run_pipeline", "__version__",
]
