"""Parameter spaces, objectives and the staged quasi-Newton driver.

The optimiser works in an unconstrained internal space.  Bounded ODE
parameters and initial values pass through a logit-box transform; the noise
variance and the diffusion are optimised on a log scale, with their bounds
handed to L-BFGS-B as box constraints in log space.  Gradients are forward
(optionally central) finite differences in the internal coordinates.
"""

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit

from .linearize import EK1
from .pnsolver import SolverDivergence, make_grid, solve_ivp
from .prior import GaussMarkovPrior
from .regression import DegenerateInnovation, fenrir_nll
from .rk import TRUTH_ATOL, TRUTH_RTOL, RkFailure, rk_lsq_loss, trajectory

log = logging.getLogger(__name__)

ODE = "ode-param"
INIT = "init-value"
NOISE = "noise"
DIFFUSION = "diffusion"
ROLES = (ODE, INIT, NOISE, DIFFUSION)

IDENTITY = "identity"
LOG = "log"
LOGIT_BOX = "logit-box"

PENALTY = 1e10
FD_STEP = 1e-7
FD_STEP_CENTRAL = 1e-6
FORWARD = "forward"
CENTRAL = "central"
FTOL = 1e-9
GTOL = 1e-6
MAXITER = 500
# initial values are kept this far (relative to the box width) inside bounds
INTERIOR = 1e-9

FENRIR = "fenrir"
RK = "rk"


@dataclass(frozen=True)
class Param:
    name: str
    role: str
    lower: float
    upper: float
    transform: str
    init_rule: str = "folded-normal"
    index: int = -1  # state component for initial values

    def to_internal(self, x):
        if self.transform == LOG:
            return np.log(x)
        if self.transform == LOGIT_BOX:
            return logit((x - self.lower) / (self.upper - self.lower))
        return float(x)

    def to_natural(self, z):
        if self.transform == LOG:
            return np.exp(z)
        if self.transform == LOGIT_BOX:
            return self.lower + (self.upper - self.lower) * expit(z)
        return float(z)

    def clip(self, x):
        if self.transform == LOGIT_BOX:
            eps = INTERIOR * (self.upper - self.lower)
            return float(np.clip(x, self.lower + eps, self.upper - eps))
        return float(np.clip(x, self.lower, self.upper))


@dataclass(frozen=True)
class ParamSpace:
    params: tuple

    def __len__(self):
        return len(self.params)

    @property
    def names(self):
        return tuple(p.name for p in self.params)

    def indices(self, *roles):
        return np.array([i for i, p in enumerate(self.params) if p.role in roles], dtype=int)

    def to_internal(self, x):
        return np.array([p.to_internal(v) for p, v in zip(self.params, x)])

    def to_natural(self, z):
        return np.array([p.to_natural(v) for p, v in zip(self.params, z)])

    def internal_bounds(self):
        """Box constraints for L-BFGS-B (only log-scale parameters are boxed)."""
        return [
            (np.log(p.lower), np.log(p.upper)) if p.transform == LOG else (None, None) for p in self.params
        ]

    def clip(self, x):
        return np.array([p.clip(v) for p, v in zip(self.params, x)])

    def split(self, x):
        """``(theta, init, sigma2, kappa)`` from a natural-scale vector; missing parts are None."""
        x = np.asarray(x, dtype=float)
        parts = []
        for role in ROLES:
            idx = self.indices(role)
            parts.append(x[idx] if idx.size else None)
        theta, init, s2, kap = parts
        return theta, init, None if s2 is None else float(s2[0]), None if kap is None else float(kap[0])

    def assemble(self, theta=None, init=None, sigma2=None, kappa=None):
        x = np.zeros(len(self))
        for role, val in ((ODE, theta), (INIT, init), (NOISE, sigma2), (DIFFUSION, kappa)):
            idx = self.indices(role)
            if idx.size:
                if val is None:
                    raise ValueError(f"missing values for {role}")
                x[idx] = np.atleast_1d(val)
        return x

    @classmethod
    def from_problem(cls, problem, method=FENRIR, fit_init=None):
        fit_init = problem.fit_init if fit_init is None else fit_init
        ps = [
            Param(n, ODE, lo, hi, LOGIT_BOX, problem.param_init)
            for n, (lo, hi) in zip(problem.param_names, problem.param_bounds)
        ]
        if fit_init:
            ps += [
                Param(n, INIT, lo, hi, LOGIT_BOX, problem.init_rule, index=i)
                for i, (n, (lo, hi)) in enumerate(zip(problem.init_names, problem.init_bounds))
            ]
        if method == FENRIR:
            ps.append(Param("sigma2", NOISE, *problem.sigma2_bounds, LOG))
            ps.append(Param("kappa", DIFFUSION, *problem.kappa_bounds, LOG))
        return cls(tuple(ps))


def _observed_component(obs, index, t0):
    """Noisy value of state component ``index`` at ``t0`` if measured directly."""
    if obs is None or len(obs) == 0 or abs(obs.times[0] - t0) > 1e-12 * max(1.0, abs(t0)):
        return None
    for r, row in enumerate(obs.H):
        if row[index] == 1.0 and np.count_nonzero(row) == 1:
            return float(obs.values[0, r])
    return None


def init_params(space, seed, obs=None, t0=0.0):
    """Random starting point following each parameter's initialisation rule.

    ODE parameters are ``|N(0, 1)|`` (or ``U[0, 1]``); initial values are the
    first observation where the component is measured directly, otherwise 0,
    or ``|N(0, 0.1^2)|`` for the small-fraction rule; ``sigma2 = kappa = 1``.
    """
    rng = np.random.default_rng([int(seed), 1])
    x = np.empty(len(space))
    for i, p in enumerate(space.params):
        if p.role in (NOISE, DIFFUSION):
            x[i] = 1.0
        elif p.init_rule == "uniform":
            x[i] = rng.uniform(0.0, 1.0)
        elif p.init_rule == "folded-normal-0.1":
            x[i] = abs(rng.normal(0.0, 0.1))
        elif p.init_rule == "observed":
            v = _observed_component(obs, p.index, t0)
            x[i] = 0.0 if v is None else v
        else:
            x[i] = abs(rng.normal())
    return space.clip(x)


def scan_diffusion(objective, x, per_decade=1):
    """Replace the diffusion in ``x`` by the best value on a log grid over its bounds.

    At small diffusion the likelihood is flat in ``kappa`` (the solver
    uncertainty is negligible next to the measurement noise), so a gradient
    method started there never moves it.  The scan costs one ODE solve.
    """
    space = objective.space
    idx = space.indices(DIFFUSION)
    if idx.size == 0:
        return np.asarray(x, dtype=float)
    i = int(idx[0])
    p = space.params[i]
    lo, hi = np.log10(p.lower), np.log10(p.upper)
    grid = 10.0 ** np.linspace(lo, hi, int(round((hi - lo) * per_decade)) + 1)
    x = np.array(x, dtype=float)
    best, best_k = np.inf, x[i]
    for k in grid:
        x[i] = k
        v = objective(space.to_internal(x))
        if v < best:
            best, best_k = v, k
    x[i] = best_k
    return x


class Objective:
    """Callable on internal coordinates returning a finite scalar.

    For the Fenrir objective the last few solver runs are cached by
    ``(theta, y0)``, so steps that only move the noise or the diffusion do
    not re-solve the ODE.
    """

    def __init__(self, problem, obs, method=FENRIR, space=None, nu=5, mode=EK1, dt=None, cache_size=4):
        if method not in (FENRIR, RK):
            raise ValueError(f"unknown method {method!r}")
        self.problem = problem
        self.obs = obs
        self.method = method
        self.space = space if space is not None else ParamSpace.from_problem(problem, method)
        self.prior = GaussMarkovPrior(nu, problem.d)
        self.mode = mode
        dt = problem.dt if dt is None else dt
        t_end = max(problem.data_times[-1], obs.times[-1] if len(obs) else problem.t0)
        self.grid = make_grid(problem.t0, t_end, dt, obs.times)
        self._cache = OrderedDict()
        self._cache_size = cache_size
        self.n_evals = 0
        self.n_solves = 0

    def natural(self, z):
        return self.space.to_natural(z)

    def _state(self, x):
        theta, init, s2, kappa = self.space.split(x)
        y0 = self.problem.initial_value(self.problem.true_init if init is None else init)
        return theta, y0, s2, kappa

    def chain(self, theta, y0):
        key = (theta.tobytes(), y0.tobytes())
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        try:
            chain, _ = solve_ivp(self.problem.field, theta, y0, self.prior, self.grid, self.mode, self.problem.t0)
        except SolverDivergence as err:
            log.debug("%s", err)
            chain = None
        self.n_solves += 1
        self._cache[key] = chain
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return chain

    def value_natural(self, x):
        theta, y0, s2, kappa = self._state(x)
        if self.method == RK:
            return rk_lsq_loss(self.problem, theta, self.obs, y0)
        chain = self.chain(theta, y0)
        try:
            return fenrir_nll(chain, self.obs, kappa, s2)
        except DegenerateInnovation:
            return np.inf

    def __call__(self, z):
        self.n_evals += 1
        with np.errstate(all="ignore"):
            v = self.value_natural(self.natural(np.asarray(z, dtype=float)))
        # huge but finite values (blow-up inside the span) are failures too
        return float(v) if np.isfinite(v) and v < PENALTY else PENALTY


def make_objective(problem, obs, method=FENRIR, **kwargs):
    return Objective(problem, obs, method, **kwargs)


@dataclass(frozen=True)
class Stage:
    """Parameters optimised in one pass; ``scan_diffusion`` grid-searches kappa first."""

    name: str
    roles: tuple
    scan_diffusion: bool = False


NOISE_DIFFUSION_STAGE = Stage("noise-diffusion-only", (NOISE, DIFFUSION))
NOISE_DIFFUSION_SCAN_STAGE = Stage("noise-diffusion-only", (NOISE, DIFFUSION), scan_diffusion=True)
JOINT_STAGE = Stage("joint", ROLES)


def schedule_for(problem):
    """Stages for the Fenrir objective of ``problem``.

    Problems flagged ``diffusion_scan`` start the noise-diffusion stage from
    the best kappa on a grid, which lets the posterior interpolate the data
    before the joint stage.  On sparse data (Lotka-Volterra) that start ends
    in an interpolating local optimum with the noise at its lower bound, so
    it is not used there.
    """
    if not problem.staged:
        return [JOINT_STAGE]
    first = NOISE_DIFFUSION_SCAN_STAGE if problem.diffusion_scan else NOISE_DIFFUSION_STAGE
    return [first, JOINT_STAGE]


@dataclass
class FitResult:
    names: tuple
    params: np.ndarray
    nll: float
    trace: list
    stage_bounds: list
    status: str
    seed: Optional[int] = None
    wall_time: float = 0.0
    n_evals: int = 0
    stages: list = field(default_factory=list)

    def as_dict(self):
        return dict(zip(self.names, self.params.tolist()))


def fd_gradient(fun, z, step=None, active=None, scheme=FORWARD, f0=None):
    """Finite-difference gradient with step ``step * max(1, |z_i|)``.

    Forward differences cost one evaluation per coordinate (plus ``f0`` if
    not given); central differences cost two.
    """
    z = np.asarray(z, dtype=float)
    active = np.arange(z.size) if active is None else active
    if scheme not in (FORWARD, CENTRAL):
        raise ValueError(f"unknown difference scheme {scheme!r}")
    if step is None:
        step = FD_STEP if scheme == FORWARD else FD_STEP_CENTRAL
    if scheme == FORWARD and f0 is None:
        f0 = fun(z)
    g = np.zeros(z.size)
    # last coordinates first: noise and diffusion steps then hit the solve cache
    for i in active[::-1]:
        h = step * max(1.0, abs(z[i]))
        zp = z.copy()
        zp[i] += h
        if scheme == FORWARD:
            g[i] = (fun(zp) - f0) / (zp[i] - z[i])
        else:
            zm = z.copy()
            zm[i] -= h
            g[i] = (fun(zp) - fun(zm)) / (zp[i] - zm[i])
    return g


def fit(
    objective, space, init, schedule=(JOINT_STAGE,), seed=None, maxiter=MAXITER, ftol=FTOL, gtol=GTOL,
    scheme=FORWARD,
):
    """Minimise ``objective`` stage by stage from the natural-scale ``init``.

    Each stage runs L-BFGS-B on the parameters whose role it lists; the
    others stay fixed.  Returns the best iterate seen.
    """
    t_start = time.perf_counter()
    init = np.asarray(init, dtype=float)
    lo = np.array([p.lower for p in space.params])
    hi = np.array([p.upper for p in space.params])
    if np.any(init < lo) or np.any(init > hi):
        raise ValueError("initial parameters outside bounds")
    z = space.to_internal(space.clip(init))
    f = objective(z)
    trace = [f]
    bounds = space.internal_bounds()
    z_best, f_best = z.copy(), f
    stage_bounds, stage_names, statuses = [], [], []
    for stage in schedule:
        active = space.indices(*stage.roles)
        if active.size == 0:
            continue
        if stage.scan_diffusion:
            x = scan_diffusion(objective, space.to_natural(z))
            z = space.to_internal(x)
            f = objective(z)
            trace.append(f)
        f_stage_start = f

        def sub(za, z=z, active=active):
            full = z.copy()
            full[active] = za
            return full

        def fun_and_grad(za):
            full = sub(za)
            val = objective(full)
            grad = fd_gradient(objective, full, active=active, scheme=scheme, f0=val)[active]
            return val, grad

        def record(intermediate_result):
            trace.append(float(intermediate_result.fun))

        res = minimize(
            fun_and_grad,
            z[active],
            jac=True,
            method="L-BFGS-B",
            bounds=[bounds[i] for i in active],
            callback=record,
            options={"maxiter": maxiter, "ftol": ftol, "gtol": gtol},
        )
        z = sub(res.x)
        f = objective(z)
        if trace[-1] != f:
            trace.append(f)
        if f < f_best:
            z_best, f_best = z.copy(), f
        if not f < f_stage_start and f_stage_start < PENALTY:
            statuses.append("stalled")
        elif res.nit >= maxiter:
            statuses.append("max-iter")
        elif f >= PENALTY:
            statuses.append("failed")
        else:
            statuses.append("converged" if res.success else "stalled")
        stage_bounds.append(len(trace) - 1)
        stage_names.append(stage.name)
    order = ("failed", "max-iter", "stalled", "converged")
    status = min(statuses, key=order.index) if statuses else "converged"
    if statuses and statuses[-1] == "converged" and status == "stalled":
        # an earlier stage that could not improve is harmless if the last one converged
        status = "converged"
    x_best = space.clip(space.to_natural(z_best))
    return FitResult(
        names=space.names,
        params=x_best,
        nll=float(min(trace)),
        trace=trace,
        stage_bounds=stage_bounds,
        status=status,
        seed=seed,
        wall_time=time.perf_counter() - t_start,
        n_evals=objective.n_evals if hasattr(objective, "n_evals") else 0,
        stages=stage_names,
    )


def fitted_state(problem, space, x):
    """ODE parameters and initial value from a natural-scale vector."""
    theta, init, _, _ = space.split(x)
    return theta, problem.initial_value(problem.true_init if init is None else init)


def true_trajectory(problem, times=None):
    times = problem.data_times if times is None else times
    return trajectory(problem.field, problem.true_params, problem.true_y0, times, problem.t0, TRUTH_ATOL, TRUTH_RTOL)


def trmse(problem, fitted, space=None, truth=None):
    """Root mean square distance between re-integrated fit and noise-free truth on the data grid."""
    if isinstance(fitted, FitResult):
        if space is None:
            raise ValueError("a ParamSpace is needed to interpret a FitResult")
        theta, y0 = fitted_state(problem, space, fitted.params)
    else:
        theta, y0 = fitted
    truth = true_trajectory(problem) if truth is None else truth
    try:
        with np.errstate(all="ignore"):
            est = trajectory(problem.field, theta, y0, problem.data_times, problem.t0, TRUTH_ATOL, TRUTH_RTOL)
    except RkFailure:
        return np.inf
    err = np.sqrt(np.mean(np.sum((est - truth) ** 2, axis=1)))
    return float(err) if np.isfinite(err) else np.inf
