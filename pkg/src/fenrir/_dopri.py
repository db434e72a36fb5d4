"""Compiled Dormand--Prince 5(4) integration sampled at fixed output times.

The step-size controller, initial step and continuous extension follow
:class:`scipy.integrate.RK45` (the tableau is taken from it), so results agree
with the scipy route to rounding.  Used when the vector field is itself a
compiled function; the per-step overhead of the scipy stepper otherwise
dominates the least-squares baseline.
"""

import numpy as np
from numba import njit
from scipy.integrate import RK45

OK = 0
STEP_TOO_SMALL = 1
BUDGET_EXHAUSTED = 2
NON_FINITE = 3

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0

TABLEAU = (
    np.ascontiguousarray(RK45.A, dtype=float),
    np.ascontiguousarray(RK45.B, dtype=float),
    np.ascontiguousarray(RK45.C, dtype=float),
    np.ascontiguousarray(RK45.E, dtype=float),
    np.ascontiguousarray(RK45.P, dtype=float),
)
ERROR_ORDER = RK45.error_estimator_order


@njit(cache=True)
def _rms(x):
    return np.sqrt(np.sum(x * x) / x.size)


@njit
def _initial_step(f, theta, t0, y0, f0, t_bound, order, rtol, atol):
    length = abs(t_bound - t0)
    scale = atol + np.abs(y0) * rtol
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, length)
    f1 = np.asarray(f(t0 + h0, y0 + h0 * f0, theta), dtype=np.float64)
    d2 = _rms((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100 * h0, h1, length)


# not disk-cached: numba cannot reload cached overloads keyed by function arguments
@njit
def dopri_sample(f, theta, t0, y0, times, rtol, atol, max_steps, A, B, C, E, P, order):
    """Integrate from ``t0`` to ``times[-1]`` and return the states at ``times``.

    ``times`` must be sorted and not before ``t0``.  Returns
    ``(status, ys, n_steps)``.
    """
    n_out = times.size
    d = y0.size
    n_stages = B.size
    ys = np.full((n_out, d), np.nan)
    t_bound = times[-1]
    y = y0.copy()
    t = t0
    j = 0
    while j < n_out and times[j] <= t0:
        ys[j] = y0
        j += 1
    if j == n_out:
        return OK, ys, 0
    fy = np.asarray(f(t, y, theta), dtype=np.float64)
    if not np.all(np.isfinite(fy)):
        return NON_FINITE, ys, 0
    h_abs = _initial_step(f, theta, t0, y0, fy, t_bound, order, rtol, atol)
    exponent = -1.0 / (order + 1)
    K = np.empty((n_stages + 1, d))
    steps = 0
    while t < t_bound:
        if steps >= max_steps:
            return BUDGET_EXHAUSTED, ys, steps
        min_step = 10 * abs(np.nextafter(t, np.inf) - t)
        if h_abs < min_step:
            h_abs = min_step
        accepted = False
        rejected = False
        while not accepted:
            if h_abs < min_step:
                return STEP_TOO_SMALL, ys, steps
            t_new = t + h_abs
            if t_new > t_bound:
                t_new = t_bound
            h = t_new - t
            h_abs = abs(h)
            K[0] = fy
            for s in range(1, n_stages):
                dy = np.zeros(d)
                for r in range(s):
                    dy += A[s, r] * K[r]
                K[s] = np.asarray(f(t + C[s] * h, y + h * dy, theta), dtype=np.float64)
            acc = np.zeros(d)
            for r in range(n_stages):
                acc += B[r] * K[r]
            y_new = y + h * acc
            f_new = np.asarray(f(t + h, y_new, theta), dtype=np.float64)
            K[n_stages] = f_new
            err = np.zeros(d)
            for r in range(n_stages + 1):
                err += E[r] * K[r]
            scale = atol + np.maximum(np.abs(y), np.abs(y_new)) * rtol
            error_norm = _rms(err * h / scale)
            if not np.isfinite(error_norm):
                return NON_FINITE, ys, steps
            if error_norm < 1:
                if error_norm == 0:
                    factor = MAX_FACTOR
                else:
                    factor = min(MAX_FACTOR, SAFETY * error_norm**exponent)
                if rejected:
                    factor = min(1.0, factor)
                h_abs *= factor
                accepted = True
            else:
                h_abs *= max(MIN_FACTOR, SAFETY * error_norm**exponent)
                rejected = True
        steps += 1
        if not (np.all(np.isfinite(y_new)) and np.all(np.isfinite(f_new))):
            return NON_FINITE, ys, steps
        # continuous extension on [t, t_new]
        if j < n_out and times[j] <= t_new:
            Q = K.T @ P
            while j < n_out and times[j] <= t_new:
                x = (times[j] - t) / h
                p = x
                val = np.zeros(d)
                for c in range(Q.shape[1]):
                    val += Q[:, c] * p
                    p *= x
                ys[j] = y + h * val
                j += 1
        t = t_new
        y = y_new
        fy = f_new
    return OK, ys, steps


def sample(f, theta, t0, y0, times, rtol, atol, max_steps):
    A, B, C, E, P = TABLEAU
    return dopri_sample(
        f, np.ascontiguousarray(theta, dtype=float), float(t0), np.ascontiguousarray(y0, dtype=float),
        np.ascontiguousarray(times, dtype=float), float(rtol), float(atol), int(max_steps),
        A, B, C, E, P, ERROR_ORDER,
    )
