"""Closed-loop polynomial-guidance rollout, numpy implementation.

Vectorized over a batch of independent rollouts: every array argument has
a leading batch axis ``B``.  The compiled kernel in ``_rollout_cy.pyx``
implements the same arithmetic one rollout at a time; both must agree to
round-off.

Per guidance cycle the net acceleration is re-planned as a cubic in time
from the current position, velocity and the net acceleration applied at
the end of the previous cycle.  The commanded thrust acceleration
``a = abar - g`` is saturated in magnitude to ``[t_min, t_max] / m`` with
its direction kept, and the state is advanced with one RK4 step per cycle.
"""
from __future__ import annotations

import numpy as np

# status codes shared with the compiled kernel
CONVERGED = 0
MISSED = 1
GROUND_IMPACT = 2
MASS_FLOOR = 3

# inverse of the normalized boundary system for (c1, c2, c3)
MINV = np.array([[3.0, -24.0, 60.0], [-12.0, 84.0, -180.0], [10.0, -60.0, 120.0]])


def normalized_coefficients(r, v, abar0, rf, vf, abarf, tgo):
    """Coefficients ``c_k = C_k * tgo**k`` of the net-acceleration cubic.

    Arrays of shape ``(..., 3)``; ``tgo`` broadcasts against ``(...)``.
    """
    T = np.asarray(tgo, dtype=float)[..., None]
    dv = (vf - v) / T
    dr = (rf - r - v * T) / (T * T)
    rhs = np.stack([abarf - abar0, dv - abar0, dr - 0.5 * abar0], axis=-1)
    c123 = rhs @ MINV.T
    return np.concatenate([abar0[..., None], c123], axis=-1)  # (..., 3 axes, 4)


def _command(c, tau, T, mass, gravity, t_min, t_max):
    """Applied thrust acceleration and thrust magnitude at cycle time ``tau``."""
    s = np.asarray(tau / T)[..., None]
    abar = c[..., 0] + s * (c[..., 1] + s * (c[..., 2] + s * c[..., 3]))
    a = abar - gravity
    norm = np.sqrt(np.sum(a * a, axis=-1))
    thrust = mass * norm
    clipped = np.clip(thrust, t_min, t_max)
    safe = np.where(norm > 0, norm, 1.0)
    # a zero command has no direction: push straight up
    direction = np.where((norm > 0)[..., None], a / safe[..., None], np.array([0.0, 1.0, 0.0]))
    return direction * (clipped / mass)[..., None], clipped, clipped != thrust


def rollout_batch(states, targets, abar0, tgo, gravity, t_min, t_max, exhaust_velocity,
                  dry_mass, period=0.1, pos_tol=1.0, vel_tol=0.1, trace=False):
    """Run ``B`` closed-loop rollouts.

    Parameters
    ----------
    states : (B, 7) array
        Initial local states ``[x, y, z, vx, vy, vz, m]``.
    targets : (B, 9) array
        Terminal ``[r_f, v_f, abar_f]`` per rollout (net acceleration).
    abar0 : (B, 3) array
        Net acceleration at the start (first-cycle ``abar_0``).
    tgo : (B,) array
        Time to go of each rollout, s.
    trace : bool
        Also return the state and thrust after every cycle (for ``B = 1``
        diagnostics; memory grows with the horizon).

    Returns
    -------
    final : (B, 7) array
    status : (B,) int array of status codes
    saturated : (B,) int array, cycles with thrust saturation
    history : tuple ``(times, states, thrust, thrust_accel)`` for row 0 when
        ``trace`` else ``None``
    """
    x = np.array(states, dtype=float, ndmin=2)
    tgt = np.array(targets, dtype=float, ndmin=2)
    ab = np.array(abar0, dtype=float, ndmin=2)
    tg = np.atleast_1d(np.asarray(tgo, dtype=float)).copy()
    g = np.asarray(gravity, dtype=float)
    B = x.shape[0]
    t_min = np.broadcast_to(np.asarray(t_min, dtype=float), (B,))
    t_max = np.broadcast_to(np.asarray(t_max, dtype=float), (B,))
    rf, vf, af = tgt[:, 0:3], tgt[:, 3:6], tgt[:, 6:9]
    n_cycles = np.maximum(np.ceil(tg / period - 1e-9).astype(int), 1)
    status = np.full(B, CONVERGED)
    active = np.ones(B, dtype=bool)
    saturated = np.zeros(B, dtype=int)
    elapsed = np.zeros(B)
    history = ([0.0], [x[0].copy()], [np.nan], [np.full(3, np.nan)]) if trace else None
    ve = float(exhaust_velocity)

    for k in range(int(n_cycles.max())):
        active &= k < n_cycles
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xs = x[idx]
        remaining = tg[idx] - elapsed[idx]
        last = k == n_cycles[idx] - 1
        h = np.where(last, remaining, period)
        c = normalized_coefficients(xs[:, 0:3], xs[:, 3:6], ab[idx], rf[idx], vf[idx], af[idx], remaining)
        lo, hi = t_min[idx], t_max[idx]

        def deriv(y, tau):
            acc, thrust, sat = _command(c, tau, remaining, y[:, 6], g, lo, hi)
            dy = np.empty_like(y)
            dy[:, 0:3] = y[:, 3:6]
            dy[:, 3:6] = acc + g
            dy[:, 6] = -thrust / ve
            return dy, sat

        k1, s1 = deriv(xs, 0.0)
        k2, s2 = deriv(xs + 0.5 * h[:, None] * k1, 0.5 * h)
        k3, s3 = deriv(xs + 0.5 * h[:, None] * k2, 0.5 * h)
        k4, s4 = deriv(xs + h[:, None] * k3, h)
        xn = xs + (h / 6.0)[:, None] * (k1 + 2 * k2 + 2 * k3 + k4)
        acc_end, thrust_end, s5 = _command(c, h, remaining, xn[:, 6], g, lo, hi)
        saturated[idx] += (s1 | s2 | s3 | s4 | s5).astype(int)
        x[idx] = xn
        ab[idx] = acc_end + g
        elapsed[idx] += h
        if trace:
            history[0].append(float(elapsed[0]))
            history[1].append(xn[0].copy())
            history[2].append(float(thrust_end[0]))
            history[3].append(acc_end[0].copy())

        floor = xn[:, 6] <= dry_mass
        impact = (xn[:, 1] < -pos_tol) & ~last
        status[idx[floor]] = MASS_FLOOR
        status[idx[impact & ~floor]] = GROUND_IMPACT
        active[idx[floor | impact]] = False

    ok = status == CONVERGED
    miss_r = np.linalg.norm(x[:, 0:3] - rf, axis=1)
    miss_v = np.linalg.norm(x[:, 3:6] - vf, axis=1)
    status[ok & ((miss_r >= pos_tol) | (miss_v >= vel_tol))] = MISSED
    if trace:
        history = tuple(np.array(h) for h in history)
    return x, status, saturated, history
