# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled closed-loop rollout kernel.

Same arithmetic as ``_rollout_py.rollout_batch`` (one RK4 step per
guidance cycle, thrust saturation with the direction kept), looping over
the batch in C.  No trace output: use the numpy kernel for diagnostics.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, ceil

cnp.import_array()

cdef int CONVERGED = 0
cdef int MISSED = 1
cdef int GROUND_IMPACT = 2
cdef int MASS_FLOOR = 3


cdef inline bint _command(const double[:, ::1] c, double s, double mass, const double* g,
                          double t_min, double t_max, double* acc, double* thrust) noexcept nogil:
    cdef double a[3]
    cdef double norm = 0.0, T, clipped, scale
    cdef int i
    for i in range(3):
        a[i] = c[i, 0] + s * (c[i, 1] + s * (c[i, 2] + s * c[i, 3])) - g[i]
        norm += a[i] * a[i]
    norm = sqrt(norm)
    T = mass * norm
    clipped = T
    if clipped < t_min:
        clipped = t_min
    if clipped > t_max:
        clipped = t_max
    if norm > 0:
        scale = clipped / mass / norm
        for i in range(3):
            acc[i] = a[i] * scale
    else:
        acc[0] = 0.0
        acc[1] = clipped / mass
        acc[2] = 0.0
    thrust[0] = clipped
    return clipped != T


cdef inline bint _deriv(const double* y, double s, const double[:, ::1] c, const double* g,
                        double t_min, double t_max, double ve, double* dy) noexcept nogil:
    cdef double acc[3]
    cdef double thrust
    cdef bint sat = _command(c, s, y[6], g, t_min, t_max, acc, &thrust)
    cdef int i
    for i in range(3):
        dy[i] = y[3 + i]
        dy[3 + i] = acc[i] + g[i]
    dy[6] = -thrust / ve
    return sat


def rollout_batch(states, targets, abar0, tgo, gravity, t_min, t_max, double exhaust_velocity,
                  double dry_mass, double period=0.1, double pos_tol=1.0, double vel_tol=0.1,
                  trace=False):
    """Compiled counterpart of ``_rollout_py.rollout_batch`` (``trace`` unsupported)."""
    if trace:
        raise ValueError("the compiled kernel does not record traces")
    cdef double[:, ::1] x = np.array(states, dtype=float, ndmin=2, order="C")
    cdef double[:, ::1] tgt = np.ascontiguousarray(np.array(targets, dtype=float, ndmin=2))
    cdef double[:, ::1] ab = np.array(abar0, dtype=float, ndmin=2, order="C")
    cdef double[::1] tg = np.ascontiguousarray(np.atleast_1d(np.asarray(tgo, dtype=float)))
    cdef Py_ssize_t B = x.shape[0]
    cdef double[::1] lo = np.ascontiguousarray(np.broadcast_to(np.asarray(t_min, dtype=float), (B,)))
    cdef double[::1] hi = np.ascontiguousarray(np.broadcast_to(np.asarray(t_max, dtype=float), (B,)))
    cdef double[::1] gv = np.ascontiguousarray(np.asarray(gravity, dtype=float))
    status_arr = np.zeros(B, dtype=np.intc)
    sat_arr = np.zeros(B, dtype=np.intc)
    cdef int[::1] status = status_arr
    cdef int[::1] saturated = sat_arr
    cdef double[:, ::1] c = np.zeros((3, 4))
    cdef double g[3]
    cdef double y[7]
    cdef double k1[7]
    cdef double k2[7]
    cdef double k3[7]
    cdef double k4[7]
    cdef double tmp[7]
    cdef double acc[3]
    cdef double thrust, remaining, elapsed, h, T, T2, dv, dr, r0, r1, r2, mr, mv
    cdef bint sat, last
    cdef long n_cycles, k
    cdef Py_ssize_t b, i
    for i in range(3):
        g[i] = gv[i]

    with nogil:
        for b in range(B):
            n_cycles = <long>ceil(tg[b] / period - 1e-9)
            if n_cycles < 1:
                n_cycles = 1
            elapsed = 0.0
            for i in range(7):
                y[i] = x[b, i]
            for k in range(n_cycles):
                last = k == n_cycles - 1
                remaining = tg[b] - elapsed
                h = remaining if last else period
                T = remaining
                T2 = T * T
                for i in range(3):
                    dv = (tgt[b, 3 + i] - y[3 + i]) / T
                    dr = (tgt[b, i] - y[i] - y[3 + i] * T) / T2
                    r0 = tgt[b, 6 + i] - ab[b, i]
                    r1 = dv - ab[b, i]
                    r2 = dr - 0.5 * ab[b, i]
                    c[i, 0] = ab[b, i]
                    c[i, 1] = 3.0 * r0 - 24.0 * r1 + 60.0 * r2
                    c[i, 2] = -12.0 * r0 + 84.0 * r1 - 180.0 * r2
                    c[i, 3] = 10.0 * r0 - 60.0 * r1 + 120.0 * r2
                sat = _deriv(y, 0.0, c, g, lo[b], hi[b], exhaust_velocity, k1)
                for i in range(7):
                    tmp[i] = y[i] + 0.5 * h * k1[i]
                sat |= _deriv(tmp, 0.5 * h / T, c, g, lo[b], hi[b], exhaust_velocity, k2)
                for i in range(7):
                    tmp[i] = y[i] + 0.5 * h * k2[i]
                sat |= _deriv(tmp, 0.5 * h / T, c, g, lo[b], hi[b], exhaust_velocity, k3)
                for i in range(7):
                    tmp[i] = y[i] + h * k3[i]
                sat |= _deriv(tmp, h / T, c, g, lo[b], hi[b], exhaust_velocity, k4)
                for i in range(7):
                    y[i] = y[i] + (h / 6.0) * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i])
                sat |= _command(c, h / T, y[6], g, lo[b], hi[b], acc, &thrust)
                if sat:
                    saturated[b] += 1
                for i in range(3):
                    ab[b, i] = acc[i] + g[i]
                elapsed += h
                if y[6] <= dry_mass:
                    status[b] = MASS_FLOOR
                    break
                if y[1] < -pos_tol and not last:
                    status[b] = GROUND_IMPACT
                    break
            for i in range(7):
                x[b, i] = y[i]
            if status[b] == CONVERGED:
                mr = 0.0
                mv = 0.0
                for i in range(3):
                    mr += (y[i] - tgt[b, i]) ** 2
                    mv += (y[3 + i] - tgt[b, 3 + i]) ** 2
                if sqrt(mr) >= pos_tol or sqrt(mv) >= vel_tol:
                    status[b] = MISSED
    return np.asarray(x), status_arr.astype(int), sat_arr.astype(int), None
