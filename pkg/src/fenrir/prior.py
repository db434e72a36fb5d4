"""Integrated Wiener process prior.

The state stacks the solution and its first ``nu`` derivatives,
``x = [y, y', ..., y^(nu)]``, each block of length ``d``.  The top derivative
is driven by white noise with unit diffusion, so all transition quantities
have closed forms and no matrix exponential is needed at runtime.

Besides the plain transition ``(Phi(h), Q(h))`` this module provides the
diagonal preconditioner ``T(h)`` under which the transition becomes

    Phi_bar(h) = T_ref^{-1} Phi(h) T_ref,    Q_bar(h) = T_ref^{-1} Q(h) T_ref^{-1},

whose entries depend only on ``h / h_ref``.  The filters run in these
coordinates to keep square-root factors well scaled for high ``nu``.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb, factorial

import numpy as np

from .taylor import Taylor, taylor_coefficients


@dataclass(frozen=True)
class GaussMarkovPrior:
    """``nu``-times integrated Wiener process in ``d`` dimensions."""

    nu: int
    d: int

    def __post_init__(self):
        if int(self.nu) < 1 or int(self.d) < 1:
            raise ValueError(f"need nu >= 1 and d >= 1, got nu={self.nu}, d={self.d}")

    @property
    def D(self):
        return self.d * (self.nu + 1)

    def projection(self, m):
        return projection(self, m)

    def transition(self, h):
        return iwp_transition(self, h)


@dataclass(frozen=True)
class TransitionModel:
    """Discrete transition ``x(t+h) | x(t) ~ N(Phi x(t), kappa Q)`` at unit diffusion."""

    Phi: np.ndarray
    Q: np.ndarray
    h: float
    Q_sqrt: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class InitialState:
    """Exact stacked derivatives at ``t0``.

    ``degraded`` is set when derivatives of order >= 2 could not be computed
    and were zero-filled.
    """

    x: np.ndarray
    degraded: bool = False


def projection(prior, m):
    """Selection matrix (d x D) for derivative block ``m``."""
    if not 0 <= m <= prior.nu:
        raise ValueError(f"derivative index {m} out of range 0..{prior.nu}")
    E = np.zeros((prior.d, prior.D))
    E[:, m * prior.d : (m + 1) * prior.d] = np.eye(prior.d)
    return E


def _check_step(h):
    h = float(h)
    if not h >= 0.0:
        raise ValueError(f"step length must be non-negative, got {h}")
    return h


@lru_cache(maxsize=None)
def _hilbert_cholesky(nu):
    i = np.arange(nu + 1)
    Qc = 1.0 / (2 * nu + 1 - i[:, None] - i[None, :])
    return np.linalg.cholesky(Qc)


def _kron_eye(M, d):
    return np.kron(M, np.eye(d))


def iwp_transition_1d(nu, h):
    """Scalar (d=1) transition matrices of the ``nu``-times IWP."""
    h = _check_step(h)
    i = np.arange(nu + 1)
    Phi = np.zeros((nu + 1, nu + 1))
    Q = np.zeros((nu + 1, nu + 1))
    for r in i:
        for c in i:
            if c >= r:
                Phi[r, c] = h ** (c - r) / factorial(c - r)
            p = 2 * nu + 1 - r - c
            Q[r, c] = h**p / (p * factorial(nu - r) * factorial(nu - c))
    return Phi, Q


def preconditioner(prior, h):
    """Diagonal of ``T(h)``, entries ``h^(nu-m+1/2) / (nu-m)!`` per block."""
    h = _check_step(h)
    m = np.arange(prior.nu + 1)
    t = np.array([h ** (prior.nu - k + 0.5) / factorial(prior.nu - k) for k in m])
    return np.repeat(t, prior.d)


def iwp_transition(prior, h):
    """Closed-form ``Phi(h)``, ``Q(h)`` of the IWP with unit diffusion."""
    h = _check_step(h)
    Phi1, Q1 = iwp_transition_1d(prior.nu, h)
    scale = preconditioner(GaussMarkovPrior(prior.nu, 1), h)
    Qs1 = scale[:, None] * _hilbert_cholesky(prior.nu)
    return TransitionModel(
        Phi=_kron_eye(Phi1, prior.d),
        Q=_kron_eye(Q1, prior.d),
        h=h,
        Q_sqrt=_kron_eye(Qs1, prior.d),
    )


def scaled_transitions(prior, steps, h_ref):
    """Preconditioned transitions for an array of step lengths.

    Returns arrays ``Phi_bar`` and ``Q_bar_sqrt`` of shape (n, D, D), expressed
    in the coordinates ``x = T(h_ref) x_bar``.
    """
    steps = np.asarray(steps, dtype=float)
    if np.any(steps < 0.0):
        raise ValueError("step lengths must be non-negative")
    nu, d = prior.nu, prior.d
    r = steps / float(h_ref)
    i = np.arange(nu + 1)
    diff = i[None, :] - i[:, None]
    binom = np.array([[comb(nu - a, b - a) if b >= a else 0 for b in i] for a in i], dtype=float)
    upper = diff >= 0
    Phi1 = np.where(upper, binom * r[:, None, None] ** np.where(upper, diff, 0), 0.0)
    rs = r[:, None] ** (nu - i + 0.5)[None, :]
    Qs1 = rs[:, :, None] * _hilbert_cholesky(nu)[None]
    eye = np.eye(d)
    Phi = np.einsum("nij,ab->niajb", Phi1, eye).reshape(-1, prior.D, prior.D)
    Qs = np.einsum("nij,ab->niajb", Qs1, eye).reshape(-1, prior.D, prior.D)
    return Phi, Qs


def _python_field(field):
    f = field.f
    return getattr(f, "py_func", f)


def taylor_init(field, theta, y0, nu, t0=0.0):
    """Stacked derivatives ``[y0, y0', ..., y0^(nu)]`` of the exact solution.

    Higher derivatives come from pushing a truncated Taylor series of the
    solution through the vector field, one order at a time.  Fields that do
    not accept series arguments fall back to ``[y0, f(t0, y0), 0, ...]`` with
    ``degraded=True``.
    """
    y0 = np.asarray(y0, dtype=float)
    theta = np.asarray(theta, dtype=float)
    d = y0.size
    f = _python_field(field)
    coeffs = [y0.copy()]
    degraded = False
    try:
        for k in range(nu):
            n = k + 1
            ys = np.empty(d, dtype=object)
            for j in range(d):
                ys[j] = Taylor([c[j] for c in coeffs])
            tc = np.zeros(n)
            tc[0] = t0
            if n > 1:
                tc[1] = 1.0
            out = f(Taylor(tc), ys, theta)
            coeffs.append(taylor_coefficients(out, k) / (k + 1))
    except (TypeError, AttributeError, ValueError, ZeroDivisionError):
        first = np.asarray(field.f(float(t0), y0, theta), dtype=float)
        coeffs = [y0.copy(), first] + [np.zeros(d) for _ in range(nu - 1)]
        degraded = nu >= 2
    x = np.concatenate([factorial(m) * c for m, c in enumerate(coeffs)])
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite derivative in initial state")
    return InitialState(x=x, degraded=degraded)
