"""Gauss--Markov regression on the physics-enhanced prior.

The prior is given as a terminal distribution plus backward kernels, so the
filter for the data runs from the last grid node to the first, and the
trajectory estimate comes from a smoothing pass forward in time.  The
marginal likelihood follows from the prediction error decomposition.

The backward prediction from node ``n`` to ``n-1`` is

    mean_{n-1}^+ = G_{n-1} mean_n + zeta_{n-1},
    cov_{n-1}^+  = G_{n-1} cov_n G_{n-1}^T + kappa P_{n-1},

i.e. the transition kernel of the chain itself.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K

log = logging.getLogger(__name__)


class DegenerateInnovation(np.linalg.LinAlgError):
    """Innovation covariance is not positive definite."""


@dataclass(frozen=True)
class ObservationSet:
    """Measurements ``u(t) = H y(t) + v``, ``v ~ N(0, R)``.

    ``H`` has shape (k, d) and maps the ODE state to a k-dimensional
    measurement; ``values`` has one row per time.
    """

    times: np.ndarray
    values: np.ndarray
    H: np.ndarray
    R: Optional[np.ndarray] = None

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        values = np.asarray(self.values, dtype=float).reshape(times.size, H.shape[0])
        if np.any(np.diff(times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "H", H)
        if self.R is not None:
            R = np.atleast_2d(np.asarray(self.R, dtype=float))
            if R.shape != (H.shape[0], H.shape[0]) or not np.allclose(R, R.T):
                raise ValueError("R must be a symmetric k x k matrix")
            object.__setattr__(self, "R", R)

    def __len__(self):
        return self.times.size

    @property
    def k(self):
        return self.H.shape[0]


@dataclass(frozen=True)
class RegressionResult:
    nll: float
    grid: np.ndarray
    means: np.ndarray
    cov_sqrt: np.ndarray
    residuals: np.ndarray
    innovation_covs: np.ndarray

    @property
    def covs(self):
        return np.einsum("nij,nkj->nik", self.cov_sqrt, self.cov_sqrt)


def noise_matrix(R, k):
    """Promote a scalar variance or matrix to a (k, k) covariance."""
    R = np.asarray(R, dtype=float)
    if R.ndim == 0:
        return float(R) * np.eye(k)
    return np.atleast_2d(R)


def _sqrt_psd(R):
    try:
        return np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(R)
        if w.min() < -1e-12 * max(1.0, abs(w).max()):
            raise ValueError("measurement covariance is not positive semidefinite")
        return K.tria(V * np.sqrt(np.clip(w, 0.0, None)))


def observation_rows(grid, times):
    """Row index into ``times`` for every grid node, -1 where unobserved."""
    grid = np.asarray(grid)
    times = np.asarray(times)
    rows = np.full(grid.size, -1, dtype=np.int64)
    if times.size == 0:
        return rows
    idx = np.clip(np.searchsorted(grid, times), 1, grid.size - 1) if grid.size > 1 else np.zeros(times.size, int)
    steps = np.diff(grid)
    tol = 1e-9 * (steps.min() if steps.size else 1.0)
    for r, (t, i) in enumerate(zip(times, idx)):
        cands = [j for j in (i - 1, i) if 0 <= j < grid.size]
        j = min(cands, key=lambda j: abs(grid[j] - t))
        if abs(grid[j] - t) > tol:
            raise ValueError(f"observation time {t} is not on the solver grid")
        if rows[j] >= 0:
            raise ValueError(f"two observations map to grid node {grid[j]}")
        rows[j] = r
    return rows


def _setup(chain, obs, kappa, R):
    if not kappa > 0:
        raise ValueError("diffusion must be positive")
    if obs.H.shape[1] != chain.d:
        raise ValueError(f"H has {obs.H.shape[1]} columns, ODE dimension is {chain.d}")
    R = obs.R if R is None else R
    if R is None:
        raise ValueError("no measurement covariance given")
    R = noise_matrix(R, obs.k)
    rows = observation_rows(chain.grid, obs.times)
    Hs = np.zeros((obs.k, chain.D))
    Hs[:, : chain.d] = obs.H * chain.scale[None, : chain.d]
    return rows, Hs, _sqrt_psd(R), chain.rescaled(kappa)


def fenrir_nll(chain, obs, kappa, R=None):
    """Negative log marginal likelihood of ``obs`` under the chain at diffusion ``kappa``.

    Returns ``inf`` when ``chain`` is ``None`` (a failed solve).
    """
    if chain is None:
        return np.inf
    if len(obs) == 0:
        return 0.0
    rows, Hs, Rs, sqk = _setup(chain, obs, kappa, R)
    nll, flag = K.regression_nll(
        chain.terminal_mean, chain.terminal_cov_sqrt, chain.gains, chain.offsets, chain.noise_sqrt,
        rows, obs.values, Hs, Rs, sqk,
    )
    if flag == 2:
        raise DegenerateInnovation("innovation covariance is singular; check R and kappa")
    if flag == 1:
        log.debug("jitter added to an innovation covariance")
    return float(nll)


def fenrir_posterior(chain, obs, kappa, R=None):
    """Posterior marginals (unscaled) and negative log marginal likelihood."""
    rows, Hs, Rs, sqk = _setup(chain, obs, kappa, R)
    nll, flag, m, L, resid, innov = K.regression_posterior(
        chain.terminal_mean, chain.terminal_cov_sqrt, chain.gains, chain.offsets, chain.noise_sqrt,
        rows, obs.values, Hs, Rs, sqk,
    )
    if flag == 2:
        raise DegenerateInnovation("innovation covariance is singular; check R and kappa")
    s = chain.scale
    return RegressionResult(
        nll=float(nll),
        grid=chain.grid,
        means=m * s,
        cov_sqrt=L * s[None, :, None],
        residuals=resid,
        innovation_covs=innov,
    )
