"""Adaptive explicit Runge--Kutta integration (Dormand--Prince 5(4)).

Used for ground-truth data, the least-squares baseline and trajectory
errors.  Stepping is delegated to :class:`scipy.integrate.RK45`; this module
adds a step budget, typed failures and a fixed-step mode for order checks.
Trajectories of compiled vector fields at fixed times use a compiled copy of
the same stepper.
"""

from dataclasses import dataclass

import numpy as np
from scipy.integrate import RK45, OdeSolution

from . import _dopri
from .linearize import is_jitted

DEFAULT_ATOL = 1e-8
DEFAULT_RTOL = 1e-6
TRUTH_ATOL = 1e-9
TRUTH_RTOL = 1e-7
MAX_STEPS = 100_000
# the baseline loss gives up earlier: stiff parameter values would otherwise
# spend seconds per evaluation before failing anyway
LOSS_MAX_STEPS = 10_000


class RkFailure(RuntimeError):
    """Integration stopped before reaching the end of the span."""


@dataclass(frozen=True)
class RkSolution:
    sol: OdeSolution
    t_steps: np.ndarray
    y_steps: np.ndarray
    atol: float
    rtol: float

    @property
    def n_steps(self):
        return self.t_steps.size - 1

    @property
    def span(self):
        return self.t_steps[0], self.t_steps[-1]

    def __call__(self, t):
        """States at ``t``; shape (len(t), d) for arrays, (d,) for scalars."""
        t = np.asarray(t, dtype=float)
        t0, t1 = self.span
        tol = 1e-12 * max(1.0, abs(t1))
        if np.any(t < t0 - tol) or np.any(t > t1 + tol):
            raise ValueError(f"evaluation time outside [{t0}, {t1}]")
        y = self.sol(np.clip(t, t0, t1))
        return y.T if t.ndim else y


def _rhs(field, theta):
    f = field.f
    theta = np.ascontiguousarray(theta, dtype=float)

    def rhs(t, y):
        return np.asarray(f(t, y, theta), dtype=float)

    return rhs


def rk_solve(field, theta, y0, span, atol=DEFAULT_ATOL, rtol=DEFAULT_RTOL, max_steps=MAX_STEPS):
    """Integrate ``y' = f(t, y, theta)`` over ``span`` with dense output.

    Raises
    ------
    RkFailure
        On step-size underflow, non-finite states or an exhausted step budget.
    """
    t0, t1 = map(float, span)
    if not (atol > 0 and rtol > 0):
        raise ValueError("tolerances must be positive")
    if not t1 > t0:
        raise ValueError("span must be increasing and non-degenerate")
    y0 = np.asarray(y0, dtype=float)
    with np.errstate(all="ignore"):
        solver = RK45(_rhs(field, theta), t0, y0, t1, rtol=rtol, atol=atol)
        ts, ys, interps = [t0], [y0.copy()], []
        while solver.status == "running":
            if len(ts) > max_steps:
                raise RkFailure(f"step budget of {max_steps} exhausted at t={solver.t:g}")
            msg = solver.step()
            if solver.status == "failed" or not np.all(np.isfinite(solver.y)):
                raise RkFailure(f"integration failed at t={solver.t:g}: {msg or 'non-finite state'}")
            ts.append(solver.t)
            ys.append(solver.y.copy())
            interps.append(solver.dense_output())
    return RkSolution(OdeSolution(ts, interps), np.array(ts), np.array(ys), atol, rtol)


def rk_fixed(field, theta, y0, t_end, n_steps, t0=0.0):
    """Non-adaptive Dormand--Prince steps; returns the state at ``t_end``."""
    rhs = _rhs(field, theta)
    A, B, C = RK45.A, RK45.B, RK45.C
    h = (t_end - t0) / n_steps
    y = np.asarray(y0, dtype=float).copy()
    K = np.empty((B.size, y.size))
    t = t0
    for _ in range(n_steps):
        for i in range(B.size):
            K[i] = rhs(t + C[i] * h, y + h * (A[i, :i] @ K[:i]))
        y = y + h * (B @ K)
        t += h
    return y


def trajectory(field, theta, y0, times, t0=0.0, atol=DEFAULT_ATOL, rtol=DEFAULT_RTOL, max_steps=MAX_STEPS,
               compiled=None):
    """States at ``times`` (shape (len(times), d)), integrating from ``t0``.

    Compiled vector fields go through the compiled stepper (same method and
    controller as :func:`rk_solve`) unless ``compiled=False``.
    """
    times = np.asarray(times, dtype=float)
    t_end = times[-1]
    if t_end <= t0:
        return np.tile(np.asarray(y0, float), (times.size, 1))
    if compiled is None:
        compiled = is_jitted(field.f)
    if not compiled:
        return rk_solve(field, theta, y0, (t0, t_end), atol, rtol, max_steps)(times)
    if not (atol > 0 and rtol > 0):
        raise ValueError("tolerances must be positive")
    if np.any(np.diff(times) < 0) or times[0] < t0:
        raise ValueError("output times must be sorted and not before t0")
    with np.errstate(all="ignore"):
        status, ys, n = _dopri.sample(field.f, theta, t0, y0, times, rtol, atol, max_steps)
    if status != _dopri.OK:
        reason = {_dopri.STEP_TOO_SMALL: "step size underflow", _dopri.BUDGET_EXHAUSTED: "step budget exhausted",
                  _dopri.NON_FINITE: "non-finite state"}[status]
        raise RkFailure(f"integration failed after {n} steps: {reason}")
    return ys


def rk_lsq_loss(problem, theta, obs, y0=None, atol=DEFAULT_ATOL, rtol=DEFAULT_RTOL, max_steps=LOSS_MAX_STEPS):
    """Sum of squared residuals ``sum ||H y(t) - u(t)||^2`` over the data.

    ``y0`` defaults to the problem's true initial value.  Failed integrations
    give ``inf``.
    """
    if len(obs) == 0:
        return 0.0
    y0 = problem.true_y0 if y0 is None else y0
    try:
        ys = trajectory(problem.field, theta, y0, obs.times, problem.t0, atol, rtol, max_steps)
    except RkFailure:
        return np.inf
    r = ys @ obs.H.T - obs.values
    loss = float(np.sum(r * r))
    return loss if np.isfinite(loss) else np.inf
