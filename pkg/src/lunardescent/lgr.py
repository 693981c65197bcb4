"""Legendre-Gauss-Radau collocation basis.

Nodes, quadrature weights, differentiation matrix and barycentric
interpolation on the normalized interval [-1, 1].  A grid with ``n``
collocation points carries ``n + 1`` discretization nodes: the ``n`` LGR
points (the first is -1) followed by the non-collocated endpoint +1.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as npleg

ROOT_TOL = 1e-14


def _legendre_pair(n: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return P_{n-1}, P_n and their derivatives at ``x`` via the three-term recurrence."""
    x = np.asarray(x, dtype=float)
    p_prev = np.ones_like(x)
    p = x.copy()
    dp_prev = np.zeros_like(x)
    dp = np.ones_like(x)
    if n == 1:
        return p_prev, p, dp_prev, dp
    for k in range(1, n):
        p_next = ((2 * k + 1) * x * p - k * p_prev) / (k + 1)
        dp_next = dp_prev + (2 * k + 1) * p
        p_prev, p = p, p_next
        dp_prev, dp = dp, dp_next
    return p_prev, p, dp_prev, dp


def _newton_radau_roots(n: int) -> np.ndarray | None:
    # Chebyshev-Gauss-Radau points as the starting guess.
    k = np.arange(n)
    x = -np.cos(2.0 * np.pi * k / (2 * n - 1))
    for _ in range(100):
        pm1, pn, dpm1, dpn = _legendre_pair(n, x)
        f = pm1 + pn
        df = dpm1 + dpn
        step = np.zeros_like(x)
        # x = -1 is an exact root; skip it to avoid 0/0 in the update
        free = slice(1, None)
        step[free] = f[free] / df[free]
        x = x - step
        if np.max(np.abs(step)) < ROOT_TOL:
            break
    else:
        return None
    x[0] = -1.0
    x = np.sort(x)
    if not np.all(np.diff(x) > 0) or x[-1] >= 1.0 or x[0] != -1.0:
        return None
    return x


def _companion_radau_roots(n: int) -> np.ndarray:
    coeffs = np.zeros(n + 1)
    coeffs[n - 1] = 1.0
    coeffs[n] = 1.0
    roots = np.sort(np.real(npleg.legroots(coeffs)))
    roots[0] = -1.0
    return roots


def compute_lgr_nodes(n: int) -> np.ndarray:
    """LGR collocation nodes followed by the non-collocated point +1.

    Parameters
    ----------
    n : int
        Number of collocation points, ``n >= 1``.

    Returns
    -------
    ndarray, shape (n + 1,)
        Roots of ``P_{n-1} + P_n`` in ascending order, then 1.0.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"number of collocation points must be >= 1, got {n}")
    n = int(n)
    if n == 1:
        roots = np.array([-1.0])
    else:
        roots = _newton_radau_roots(n)
        if roots is None:
            roots = _companion_radau_roots(n)
    return np.append(roots, 1.0)


def compute_quadrature_weights(nodes: np.ndarray) -> np.ndarray:
    """LGR quadrature weights for the collocation points in ``nodes``.

    ``w_1 = 2/n^2`` and ``w_i = (1 - tau_i) / (n P_{n-1}(tau_i))^2``.
    The rule is exact for polynomials of degree ``2n - 2``.
    """
    nodes = np.asarray(nodes, dtype=float)
    tau = nodes[:-1]
    n = tau.size
    if n == 1:
        return np.array([2.0])
    pm1, _, _, _ = _legendre_pair(n, tau)
    w = (1.0 - tau) / (n * pm1) ** 2
    w[0] = 2.0 / n**2
    return w


def barycentric_weights(nodes: np.ndarray) -> np.ndarray:
    """Barycentric interpolation weights ``1 / prod_{j != i} (x_i - x_j)``."""
    x = np.asarray(nodes, dtype=float)
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    if np.any(diff == 0.0):
        raise ValueError("duplicate interpolation nodes")
    # rescale each factor to keep the product in range for large n
    scale = 4.0 / (x.max() - x.min())
    return 1.0 / np.prod(diff * scale, axis=1)


def compute_differentiation_matrix(nodes: np.ndarray) -> np.ndarray:
    """LGR differentiation matrix, shape (n, n + 1).

    Row ``k`` holds the derivatives of the Lagrange basis over all ``n + 1``
    nodes evaluated at collocation node ``k``.
    """
    x = np.asarray(nodes, dtype=float)
    if np.unique(x).size != x.size:
        raise ValueError("duplicate nodes in differentiation matrix")
    b = barycentric_weights(x)
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    d = (b[None, :] / b[:, None]) / diff
    np.fill_diagonal(d, 0.0)
    np.fill_diagonal(d, -d.sum(axis=1))
    return d[:-1, :]


def lagrange_basis(nodes: np.ndarray, tau: float, weights: np.ndarray | None = None) -> np.ndarray:
    """Values of every Lagrange basis polynomial on ``nodes`` at ``tau``."""
    x = np.asarray(nodes, dtype=float)
    if weights is None:
        weights = barycentric_weights(x)
    diff = tau - x
    hit = np.flatnonzero(diff == 0.0)
    if hit.size:
        out = np.zeros_like(x)
        out[hit[0]] = 1.0
        return out
    terms = weights / diff
    return terms / terms.sum()


@dataclass(frozen=True, eq=False)
class LGRGrid:
    """Collocation data for one phase."""

    n: int
    nodes: np.ndarray
    weights: np.ndarray
    diff_matrix: np.ndarray
    bary: np.ndarray

    @property
    def collocation_nodes(self) -> np.ndarray:
        return self.nodes[:-1]

    def interpolate(self, values, tau):
        return interpolate(self, values, tau)

    def control_extrapolation(self) -> np.ndarray:
        """Weights mapping collocation-point values to the interpolant at tau = +1."""
        return _control_endpoint_weights(self.n)


@lru_cache(maxsize=64)
def _grid_cached(n: int) -> LGRGrid:
    nodes = compute_lgr_nodes(n)
    grid = LGRGrid(
        n=n,
        nodes=nodes,
        weights=compute_quadrature_weights(nodes),
        diff_matrix=compute_differentiation_matrix(nodes),
        bary=barycentric_weights(nodes),
    )
    for arr in (grid.nodes, grid.weights, grid.diff_matrix, grid.bary):
        arr.setflags(write=False)
    return grid


def lgr_grid(n: int) -> LGRGrid:
    """Build (or fetch the cached) grid with ``n`` collocation points."""
    if int(n) != n or n < 1:
        raise ValueError(f"number of collocation points must be >= 1, got {n}")
    return _grid_cached(int(n))


@lru_cache(maxsize=64)
def _control_endpoint_weights(n: int) -> np.ndarray:
    tau = compute_lgr_nodes(n)[:-1]
    w = lagrange_basis(tau, 1.0)
    w.setflags(write=False)
    return w


def interpolate(grid: LGRGrid, values, tau: float):
    """Evaluate the Lagrange interpolant through the ``n + 1`` node values.

    ``values`` may be 1-D (length n + 1) or 2-D with nodes along axis 0.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[0] != grid.n + 1:
        raise ValueError(f"expected {grid.n + 1} node values, got {values.shape[0]}")
    if not -1.0 <= tau <= 1.0:
        raise ValueError(f"tau={tau} outside [-1, 1]")
    basis = lagrange_basis(grid.nodes, tau, grid.bary)
    return basis @ values


def time_map(t0: float, tf: float, tau):
    """Map normalized time to physical time on [t0, tf]."""
    if not tf > t0:
        raise ValueError(f"final time {tf} must exceed initial time {t0}")
    return 0.5 * (tf - t0) * np.asarray(tau) + 0.5 * (tf + t0)
