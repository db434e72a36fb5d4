"""Probabilistic ODE solver producing a backward Gauss--Markov chain.

The filter runs at unit diffusion.  Because the initial covariance is zero
and the ODE information is noise-free, running at diffusion ``kappa`` only
multiplies every covariance by ``kappa`` and leaves the means untouched, so
the chain records ``kappa_applied`` and consumers rescale on the fly.

Internally all states live in preconditioned coordinates ``x = s * x_bar``
with ``s = preconditioner(prior, h_ref)``.  :class:`BackwardMarkovChain`
stores the scaled quantities and exposes unscaled views.
"""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels as K
from .linearize import EK1, _check_mode
from .prior import preconditioner, scaled_transitions, taylor_init

log = logging.getLogger(__name__)


class SolverDivergence(FloatingPointError):
    """The solver state became non-finite."""

    def __init__(self, step, time, theta):
        self.step = step
        self.time = time
        self.theta = np.asarray(theta, dtype=float)
        super().__init__(f"solver diverged at step {step} (t={time:g}) for theta={self.theta.tolist()}")


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov_sqrt: np.ndarray

    @property
    def cov(self):
        return self.cov_sqrt @ self.cov_sqrt.T


class Prediction(NamedTuple):
    belief: GaussianBelief
    gain: np.ndarray
    noise_sqrt: np.ndarray
    singular: bool


class Update(NamedTuple):
    belief: GaussianBelief
    residual: np.ndarray
    flag: int


@dataclass(frozen=True)
class SolveDiagnostics:
    residual_norms: np.ndarray
    min_innovation_eig: float
    steps: int
    n_flagged: int
    degraded_init: bool


@dataclass(frozen=True)
class BackwardMarkovChain:
    """Terminal moments plus backward kernels ``x_n = G_n x_{n+1} + zeta_n + noise``.

    Arrays are in preconditioned coordinates; ``scale`` maps them back.
    ``grid[0]`` is the initial time, where the state is known exactly.
    """

    grid: np.ndarray
    scale: np.ndarray
    terminal_mean: np.ndarray
    terminal_cov_sqrt: np.ndarray
    gains: np.ndarray
    offsets: np.ndarray
    noise_sqrt: np.ndarray
    nu: int
    d: int
    kappa_applied: float = 1.0
    filter_means: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.grid.size

    @property
    def D(self):
        return self.scale.size

    # unscaled views -------------------------------------------------------
    def gain(self, n):
        return self.scale[:, None] * self.gains[n] / self.scale[None, :]

    def offset(self, n):
        return self.scale * self.offsets[n]

    def noise(self, n):
        """Unscaled backward noise factor at diffusion ``kappa_applied``."""
        return self.scale[:, None] * self.noise_sqrt[n]

    def terminal(self):
        return GaussianBelief(self.scale * self.terminal_mean, self.scale[:, None] * self.terminal_cov_sqrt)

    def rescaled(self, kappa):
        """Factor multiplying stored covariance factors to reach diffusion ``kappa``."""
        return np.sqrt(float(kappa) / self.kappa_applied)


def make_grid(t0, t_end, dt, extra=()):
    """Uniform grid from ``t0`` to ``t_end`` merged with ``extra`` times.

    Times closer than ``1e-9 * dt`` to an earlier node are dropped, so extra
    times that coincide with uniform nodes do not create tiny steps.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_end <= t0:
        raise ValueError("t_end must exceed t0")
    n = max(1, int(np.ceil((t_end - t0) / dt - 1e-9)))
    base = t0 + dt * np.arange(n + 1)
    base[-1] = t_end
    extra = np.asarray(extra, dtype=float).ravel()
    if np.any(extra < t0 - 1e-9 * dt):
        raise ValueError("extra grid times precede the initial time")
    merged = np.sort(np.concatenate([base, extra]), kind="stable")
    tol = 1e-9 * dt
    out = [merged[0]]
    for t in merged[1:]:
        if t - out[-1] > tol:
            out.append(t)
    return np.asarray(out)


def predict(belief, trans, kappa=1.0):
    """Square-root prediction with the backward kernel parameters.

    ``Sigma^- = Phi Sigma Phi^T + kappa Q``, ``G = Sigma Phi^T (Sigma^-)^{-1}``,
    ``P = Sigma - G Sigma^- G^T``.
    """
    if kappa < 0:
        raise ValueError("diffusion must be non-negative")
    D = belief.mean.size
    if trans.Phi.shape != (D, D):
        raise ValueError(f"transition has shape {trans.Phi.shape}, state dimension is {D}")
    Qs = np.sqrt(kappa) * trans.Q_sqrt
    mp, Lp, G, Z, flag = K.predict_joint(
        np.asarray(belief.mean, float), np.asarray(belief.cov_sqrt, float), trans.Phi, Qs
    )
    if flag:
        log.debug("singular predicted covariance; gain from pseudo-inverse")
    return Prediction(GaussianBelief(mp, Lp), G, Z, bool(flag))


def update(predicted, obs):
    """Noise-free conditioning on ``C^T x = b``."""
    C = np.asarray(obs.C, float)
    D = predicted.mean.size
    if C.shape[0] != D:
        raise ValueError(f"C has shape {C.shape}, expected ({D}, k)")
    e = obs.b - C.T @ predicted.mean
    k = C.shape[1]
    m, L, _, _, flag = K.correct(predicted.mean, predicted.cov_sqrt, np.ascontiguousarray(C.T), np.zeros((k, k)), e)
    return Update(GaussianBelief(m, L), e, int(flag))


def _step_table(grid, prior):
    steps = np.diff(grid)
    if np.any(steps <= 0):
        raise ValueError("grid must be strictly increasing")
    h_ref = float(steps.max())
    ratios, step_idx = np.unique(np.round(steps / h_ref, 13), return_inverse=True)
    Phis, Qss = scaled_transitions(prior, ratios * h_ref, h_ref)
    return h_ref, np.ascontiguousarray(Phis), np.ascontiguousarray(Qss), step_idx.astype(np.int64)


def _python_loop(field, theta, grid, x0, Phis, Qss, step_idx, s0, s1, d, use_jac):
    Kn = grid.size
    D = x0.size
    means = np.zeros((Kn, D))
    gains = np.zeros((Kn - 1, D, D))
    offsets = np.zeros((Kn - 1, D))
    noises = np.zeros((Kn - 1, D, D))
    resnorms = np.zeros(Kn - 1)
    flags = np.zeros(Kn - 1, dtype=np.int64)
    min_eig = np.inf
    m = x0.copy()
    L = np.zeros((D, D))
    means[0] = m
    J = np.zeros((d, d))
    for n in range(1, Kn):
        idx = step_idx[n - 1]
        mp, Lp, G, Z, pflag = K.predict_joint(m, L, Phis[idx], Qss[idx])
        t = grid[n]
        y = s0 * mp[:d]
        with np.errstate(all="ignore"):
            fy = np.asarray(field.f(t, y, theta), dtype=float)
            if use_jac:
                J = np.asarray(field.jac(t, y, theta), dtype=float)
        if not (np.all(np.isfinite(fy)) and np.all(np.isfinite(J))):
            return K.STATUS_DIVERGED, n, means, L, gains, offsets, noises, resnorms, min_eig, flags
        mn, Ln, rn, me, cflag = K.pn_correct(mp, Lp, fy, J, s0, s1, d, use_jac)
        gains[n - 1] = G
        offsets[n - 1] = m - G @ mp
        noises[n - 1] = Z
        resnorms[n - 1] = rn
        flags[n - 1] = max(pflag, cflag)
        min_eig = min(min_eig, me)
        m, L = mn, Ln
        means[n] = m
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(L)) and np.all(np.isfinite(G))):
            return K.STATUS_DIVERGED, n, means, L, gains, offsets, noises, resnorms, min_eig, flags
    return K.STATUS_OK, Kn - 1, means, K.tria(L), gains, offsets, noises, resnorms, min_eig, flags


def solve_ivp(field, theta, y0, prior, grid, mode=EK1, t0=0.0, kappa=1.0, init=None):
    """Run the filter on ``grid`` and return the backward chain and diagnostics.

    Parameters
    ----------
    field : VectorField
    theta : array_like
        ODE parameters passed to the field.
    y0 : array_like
        Initial value at ``t0``.
    prior : GaussMarkovPrior
    grid : array_like
        Strictly increasing solver times.  ``t0`` is prepended when the grid
        starts after it.
    mode : {"ek0", "ek1"}
    kappa : float
        Diffusion used during the solve (recorded as ``kappa_applied``).
    init : InitialState, optional
        Precomputed exact initial state; computed by Taylor-mode
        differentiation otherwise.

    Raises
    ------
    SolverDivergence
        If the state becomes non-finite.
    """
    mode = _check_mode(mode)
    use_jac = mode == EK1
    if use_jac and field.jac is None:
        raise ValueError(f"EK1 needs a Jacobian; field {field.name!r} has none")
    if kappa <= 0:
        raise ValueError("diffusion must be positive")
    theta = np.ascontiguousarray(theta, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty grid")
    if grid[0] < t0 - 1e-12 * max(1.0, abs(t0)):
        raise ValueError("grid starts before the initial time")
    if grid[0] > t0 + 1e-12 * max(1.0, abs(t0)):
        grid = np.concatenate([[t0], grid])
    if grid.size < 2:
        raise ValueError("grid needs at least one step")
    if init is None:
        try:
            init = taylor_init(field, theta, y0, prior.nu, t0=grid[0])
        except (FloatingPointError, OverflowError) as err:
            raise SolverDivergence(0, grid[0], theta) from err
    h_ref, Phis, Qss, step_idx = _step_table(grid, prior)
    Qss = Qss * np.sqrt(kappa)
    scale = preconditioner(prior, h_ref)
    x0 = init.x / scale
    d = prior.d
    s0, s1 = float(scale[0]), float(scale[d])
    if field.jitted:
        jac = field.jac if field.jac is not None else field.f
        out = K.pn_loop(field.f, jac, theta, grid, x0, Phis, Qss, step_idx, s0, s1, d, use_jac)
    else:
        out = _python_loop(field, theta, grid, x0, Phis, Qss, step_idx, s0, s1, d, use_jac)
    status, last, means, L, gains, offsets, noises, resnorms, min_eig, flags = out
    if status != K.STATUS_OK:
        raise SolverDivergence(int(last), float(grid[last]), theta)
    chain = BackwardMarkovChain(
        grid=grid,
        scale=scale,
        terminal_mean=means[-1],
        terminal_cov_sqrt=L,
        gains=gains,
        offsets=offsets,
        noise_sqrt=noises,
        nu=prior.nu,
        d=d,
        kappa_applied=float(kappa),
        filter_means=means,
    )
    diag = SolveDiagnostics(
        residual_norms=resnorms,
        min_innovation_eig=float(min_eig),
        steps=grid.size - 1,
        n_flagged=int(np.count_nonzero(flags)),
        degraded_init=init.degraded,
    )
    return chain, diag


def smooth(chain, kappa=None):
    """Marginals of the chain by backward rollout, as unscaled beliefs."""
    means, sqrts = smoothed_moments(chain, kappa)
    return [GaussianBelief(m, L) for m, L in zip(means, sqrts)]


def smoothed_moments(chain, kappa=None):
    """Arrays of unscaled smoothing means (K, D) and covariance factors (K, D, D)."""
    sqk = 1.0 if kappa is None else chain.rescaled(kappa)
    n = len(chain)
    D = chain.D
    means = np.empty((n, D))
    sqrts = np.empty((n, D, D))
    m = chain.terminal_mean.copy()
    L = sqk * chain.terminal_cov_sqrt
    means[-1], sqrts[-1] = m, L
    for i in range(n - 2, -1, -1):
        m, L = K.chain_predict(m, L, chain.gains[i], chain.offsets[i], chain.noise_sqrt[i], sqk)
        means[i], sqrts[i] = m, L
    return means * chain.scale, sqrts * chain.scale[None, :, None]
