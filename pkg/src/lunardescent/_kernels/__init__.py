"""Rollout kernel selection.

The compiled kernel is used when the extension was built; otherwise the
numpy implementation is loaded.  Set ``LUNARDESCENT_KERNEL=python`` to force
the fallback.
"""
import os

from . import _rollout_py
from ._rollout_py import CONVERGED, GROUND_IMPACT, MASS_FLOOR, MISSED, normalized_coefficients

try:
    if os.environ.get("LUNARDESCENT_KERNEL", "").lower() == "python":
        raise ImportError("fallback requested")
    from ._rollout_cy import rollout_batch
    BACKEND = "cython"
except ImportError:
    rollout_batch = _rollout_py.rollout_batch
    BACKEND = "python"

STATUS_NAMES = {CONVERGED: "converged", MISSED: "missed", GROUND_IMPACT: "ground-impact",
                MASS_FLOOR: "mass-floor"}

__all__ = ["BACKEND", "rollout_batch", "normalized_coefficients", "STATUS_NAMES",
           "CONVERGED", "MISSED", "GROUND_IMPACT", "MASS_FLOOR"]
