"""ODE vector fields and affine surrogates of the information operator."""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numba.extending import is_jitted

EK0 = "ek0"
EK1 = "ek1"
MODES = (EK0, EK1)


@dataclass(frozen=True)
class VectorField:
    """Right-hand side ``f(t, y, theta)`` with an optional Jacobian in ``y``.

    ``f`` and ``jac`` may be plain Python callables or numba-jitted functions;
    when both are jitted the solver runs its whole step loop in compiled code.
    ``affine`` optionally returns the exact ``(L(t), b(t))`` of an affine field.
    """

    f: Callable
    jac: Optional[Callable]
    dim: int
    param_dim: int
    name: str = ""
    affine: Optional[Callable] = None

    def __call__(self, t, y, theta):
        return np.asarray(self.f(float(t), np.asarray(y, dtype=float), np.asarray(theta, dtype=float)))

    def jacobian(self, t, y, theta):
        if self.jac is None:
            raise ValueError(f"vector field {self.name!r} has no Jacobian")
        return np.asarray(self.jac(float(t), np.asarray(y, dtype=float), np.asarray(theta, dtype=float)))

    @property
    def is_affine(self):
        return self.affine is not None

    @property
    def jitted(self):
        return is_jitted(self.f) and (self.jac is None or is_jitted(self.jac))


@dataclass(frozen=True)
class AffineObservation:
    """Affine information model ``0 = C^T x - b`` with ``C = E1 - E0 L^T``."""

    L: np.ndarray
    b: np.ndarray
    C: np.ndarray


def _check_mode(mode):
    mode = str(mode).lower()
    if mode not in MODES:
        raise ValueError(f"unknown linearisation mode {mode!r}; expected one of {MODES}")
    return mode


def information_residual(field, theta, t, x, prior):
    """``E1^T x - f(t, E0^T x)``: zero along exact solutions."""
    x = np.asarray(x, dtype=float)
    if x.shape != (prior.D,):
        raise ValueError(f"state has shape {x.shape}, expected ({prior.D},)")
    d = prior.d
    return x[d : 2 * d] - field(t, x[:d], theta)


def observation_matrix(prior, L):
    E0, E1 = prior.projection(0), prior.projection(1)
    return E1.T - E0.T @ np.asarray(L).T


def linearize(field, theta, t, y_tilde, mode, prior):
    """Affine surrogate of the information operator around ``y_tilde``.

    EK0 drops the Jacobian (``L = 0``); EK1 uses the first-order Taylor
    expansion, which is exact for affine fields.
    """
    mode = _check_mode(mode)
    y_tilde = np.asarray(y_tilde, dtype=float)
    fy = field(t, y_tilde, theta)
    if not np.all(np.isfinite(fy)):
        raise FloatingPointError(f"non-finite vector field value at t={t}")
    if mode == EK0:
        L = np.zeros((prior.d, prior.d))
        b = fy
    else:
        L = field.jacobian(t, y_tilde, theta)
        if not np.all(np.isfinite(L)):
            raise FloatingPointError(f"non-finite Jacobian at t={t}")
        b = fy - L @ y_tilde
    return AffineObservation(L=L, b=b, C=observation_matrix(prior, L))
