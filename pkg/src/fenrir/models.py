"""Benchmark ODE systems and their experimental setups.

Vector fields are compiled with numba so the solver loop stays in native
code.  They are written with plain operators and ``np.sin`` etc. only, which
lets the Python versions run on Taylor series for exact initialisation.
"""

import json
from dataclasses import dataclass, field as dc_field, fields, replace
from typing import Optional

import numpy as np
from numba import njit

from .linearize import VectorField

G_EARTH = 9.81

LOTKA_VOLTERRA = "lotka-volterra"
FITZHUGH_NAGUMO = "fitzhugh-nagumo"
SEIR = "seir"
PENDULUM = "pendulum"
LINEAR_TEST = "linear-test"

# how initial-value parameters map to the ODE initial state
INIT_IDENTITY = "identity"
INIT_SEIR = "seir-exposed-infected"

# parameter initialisation rules
FOLDED_NORMAL = "folded-normal"
UNIFORM = "uniform"
OBSERVED = "observed"
SMALL_FOLDED_NORMAL = "folded-normal-0.1"


# -- Lotka-Volterra and the model-selection candidates ----------------------
# Equations are written out in every variant (no shared compiled helpers) so
# the pure-Python versions accept Taylor series.
@njit(cache=True)
def lv_f(t, y, th):
    return np.array([th[0] * y[0] - th[1] * y[0] * y[1], -th[2] * y[1] + th[3] * y[0] * y[1]])


@njit(cache=True)
def lv_jac(t, y, th):
    a, b, c, d = th[0], th[1], th[2], th[3]
    return np.array([[a - b * y[1], -b * y[0]], [d * y[1], -c + d * y[0]]])


@njit(cache=True)
def lv_printed_f(t, y, th):
    return np.array([th[0] * y[0] - th[1] * y[0] * y[1], -th[2] * y[0] + th[3] * y[0] * y[1]])


@njit(cache=True)
def lv_printed_jac(t, y, th):
    a, b, c, d = th[0], th[1], th[2], th[3]
    return np.array([[a - b * y[1], -b * y[0]], [-c + d * y[1], d * y[0]]])


@njit(cache=True)
def lv10_f(t, y, th):
    return np.array([th[0] * y[0] - th[1] * y[0] * y[1], -th[2] * y[1]])


@njit(cache=True)
def lv10_jac(t, y, th):
    a, b, c = th[0], th[1], th[2]
    return np.array([[a - b * y[1], -b * y[0]], [0.0, -c]])


@njit(cache=True)
def lv01_f(t, y, th):
    return np.array([th[0] * y[0] * y[0] - th[1] * y[1], -th[2] * y[1] + th[3] * y[0] * y[1]])


@njit(cache=True)
def lv01_jac(t, y, th):
    a, b, c, d = th[0], th[1], th[2], th[3]
    return np.array([[2.0 * a * y[0], -b], [d * y[1], -c + d * y[0]]])


@njit(cache=True)
def lv00_f(t, y, th):
    return np.array([th[0] * y[0] * y[0] - th[1] * y[1], -th[2] * y[1]])


@njit(cache=True)
def lv00_jac(t, y, th):
    a, b, c = th[0], th[1], th[2]
    return np.array([[2.0 * a * y[0], -b], [0.0, -c]])


# -- FitzHugh-Nagumo ----------------------------------------------------------
@njit(cache=True)
def fhn_f(t, y, th):
    a, b, c = th[0], th[1], th[2]
    return np.array([c * (y[0] - y[0] * y[0] * y[0] / 3.0 + y[1]), -(y[0] - a + b * y[1]) / c])


@njit(cache=True)
def fhn_jac(t, y, th):
    b, c = th[1], th[2]
    return np.array([[c * (1.0 - y[0] * y[0]), c], [-1.0 / c, -b / c]])


# -- SEIR ------------------------------------------------------------------------
@njit(cache=True)
def seir_f(t, y, th):
    beta, gamma, lam = th[0], th[1], th[2]
    infect = beta * y[0] * y[1]
    return np.array([-infect, infect - gamma * y[1], gamma * y[1] - lam * y[2], lam * y[2]])


@njit(cache=True)
def seir_jac(t, y, th):
    beta, gamma, lam = th[0], th[1], th[2]
    J = np.zeros((4, 4))
    J[0, 0] = -beta * y[1]
    J[0, 1] = -beta * y[0]
    J[1, 0] = beta * y[1]
    J[1, 1] = beta * y[0] - gamma
    J[2, 1] = gamma
    J[2, 2] = -lam
    J[3, 2] = lam
    return J


# -- pendulum --------------------------------------------------------------------
@njit(cache=True)
def pendulum_f(t, y, th):
    return np.array([y[1], -G_EARTH / th[0] * np.sin(y[0])])


@njit(cache=True)
def pendulum_jac(t, y, th):
    return np.array([[0.0, 1.0], [-G_EARTH / th[0] * np.cos(y[0]), 0.0]])


# -- damped oscillator (affine) ------------------------------------------------------
@njit(cache=True)
def oscillator_f(t, y, th):
    w, z = th[0], th[1]
    return np.array([y[1], -w * w * y[0] - 2.0 * z * w * y[1]])


@njit(cache=True)
def oscillator_jac(t, y, th):
    w, z = th[0], th[1]
    return np.array([[0.0, 1.0], [-w * w, -2.0 * z * w]])


def oscillator_affine(t, theta):
    theta = np.asarray(theta, dtype=float)
    return oscillator_jac(0.0, np.zeros(2), theta), np.zeros(2)


# -- logistic growth (convergence checks) ----------------------------------------------
@njit(cache=True)
def logistic_f(t, y, th):
    return th[0] * y * (1.0 - y)


@njit(cache=True)
def logistic_jac(t, y, th):
    J = np.empty((1, 1))
    J[0, 0] = th[0] * (1.0 - 2.0 * y[0])
    return J


def logistic_field():
    return VectorField(logistic_f, logistic_jac, 1, 1, "logistic")


def logistic_solution(t, y0, rate):
    """Closed-form solution of ``y' = r y (1 - y)``."""
    e = np.exp(rate * np.asarray(t, dtype=float))
    return y0 * e / (1.0 - y0 + y0 * e)


@dataclass(frozen=True)
class BenchmarkProblem:
    """An ODE, its ground truth and everything the experiments need to fit it.

    The initial state is described by ``init_names``/``true_init``; for most
    problems these are the components of ``y0`` itself, for SEIR they are the
    exposed and infected fractions from which ``y0`` is built.
    """

    name: str
    field: VectorField = dc_field(repr=False)
    param_names: tuple
    true_params: np.ndarray
    param_bounds: np.ndarray
    init_names: tuple
    true_init: np.ndarray
    init_bounds: np.ndarray
    H: np.ndarray
    noise_levels: tuple
    data_times: np.ndarray
    dt: float
    sigma2_bounds: tuple = (1e-6, 1e2)
    kappa_bounds: tuple = (1e-20, 1e50)
    t0: float = 0.0
    init_map: str = INIT_IDENTITY
    param_init: str = FOLDED_NORMAL
    init_rule: str = OBSERVED
    staged: bool = False
    diffusion_scan: bool = False
    fit_init: bool = True
    options: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        for name in ("true_params", "param_bounds", "true_init", "init_bounds", "H", "data_times"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "H", np.atleast_2d(self.H))
        if self.H.shape[1] != self.field.dim:
            raise ValueError(f"H has {self.H.shape[1]} columns, ODE dimension is {self.field.dim}")
        lo, hi = self.param_bounds.T
        if np.any(self.true_params < lo) or np.any(self.true_params > hi):
            raise ValueError(f"true parameters of {self.name} outside bounds")

    @property
    def d(self):
        return self.field.dim

    @property
    def true_y0(self):
        return self.initial_value(self.true_init)

    def initial_value(self, init):
        init = np.asarray(init, dtype=float)
        if self.init_map == INIT_SEIR:
            e0, i0 = init
            return np.array([1.0 - e0 - i0, e0, i0, 0.0])
        return init.copy()

    def noise(self, level):
        """Noise variance for ``"low"``/``"high"`` or a number."""
        if isinstance(level, str):
            names = ("low", "high")
            if level not in names[: len(self.noise_levels)]:
                raise ValueError(f"{self.name} has no {level!r} noise level")
            return self.noise_levels[names.index(level)]
        return float(level)

    def to_config(self):
        """JSON-serialisable description: registry name plus all overrides."""
        out = {"model": self.name}
        for f in fields(self):
            if f.name in ("name", "field"):
                continue
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else (list(v) if isinstance(v, tuple) else v)
        return out


def lotka_volterra(printed_form=False):
    f, jac = (lv_printed_f, lv_printed_jac) if printed_form else (lv_f, lv_jac)
    return BenchmarkProblem(
        name=LOTKA_VOLTERRA,
        field=VectorField(f, jac, 2, 4, LOTKA_VOLTERRA),
        param_names=("alpha", "beta", "gamma", "delta"),
        true_params=np.array([2.0, 1.0, 4.0, 1.0]),
        param_bounds=np.array([[0.0, 100.0]] * 4),
        init_names=("y0_1", "y0_2"),
        true_init=np.array([5.0, 3.0]),
        init_bounds=np.array([[0.0, 100.0]] * 2),
        H=np.eye(2),
        noise_levels=(0.01, 0.25),
        data_times=np.round(np.arange(21) * 0.1, 12),
        dt=5e-3,
        staged=True,
        options={"printed_form": bool(printed_form)},
    )


def fitzhugh_nagumo():
    return BenchmarkProblem(
        name=FITZHUGH_NAGUMO,
        field=VectorField(fhn_f, fhn_jac, 2, 3, FITZHUGH_NAGUMO),
        param_names=("a", "b", "c"),
        true_params=np.array([0.2, 0.2, 3.0]),
        param_bounds=np.array([[0.0, 100.0]] * 3),
        init_names=("y0_1", "y0_2"),
        true_init=np.array([-1.0, 1.0]),
        init_bounds=np.array([[-100.0, 100.0]] * 2),
        H=np.eye(2),
        noise_levels=(0.005, 0.05),
        data_times=np.round(np.arange(21) * 0.5, 12),
        dt=1e-2,
    )


def seir():
    return BenchmarkProblem(
        name=SEIR,
        field=VectorField(seir_f, seir_jac, 4, 3, SEIR),
        param_names=("beta_E", "gamma", "lambda"),
        true_params=np.array([0.5, 1.0 / 5.0, 1.0 / 21.0]),
        param_bounds=np.array([[0.0, 1.0]] * 3),
        init_names=("E0", "I0"),
        true_init=np.array([1e-4, 1e-5]),
        init_bounds=np.array([[0.0, 1.0]] * 2),
        H=np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]),
        noise_levels=(5e-4,),
        data_times=np.arange(30.0, 101.0),
        dt=0.2,
        kappa_bounds=(1e-20, 1e20),
        init_map=INIT_SEIR,
        param_init=UNIFORM,
        init_rule=SMALL_FOLDED_NORMAL,
    )


def pendulum(fit_init=True):
    return BenchmarkProblem(
        name=PENDULUM,
        field=VectorField(pendulum_f, pendulum_jac, 2, 1, PENDULUM),
        param_names=("L",),
        true_params=np.array([1.0]),
        param_bounds=np.array([[0.0, 100.0]]),
        init_names=("y0_1", "y0_2"),
        true_init=np.array([0.0, np.pi / 2]),
        init_bounds=np.array([[-100.0, 100.0]] * 2),
        H=np.array([[0.0, 1.0]]),
        noise_levels=(0.1,),
        data_times=np.round(np.arange(1001) * 0.01, 12),
        dt=0.1,
        sigma2_bounds=(1e-8, 1e4),
        staged=True,
        diffusion_scan=True,
        fit_init=fit_init,
    )


def linear_test():
    """Damped oscillator ``y'' = -w^2 y - 2 z w y'``; affine in the state."""
    return BenchmarkProblem(
        name=LINEAR_TEST,
        field=VectorField(oscillator_f, oscillator_jac, 2, 2, LINEAR_TEST, affine=oscillator_affine),
        param_names=("omega", "zeta"),
        true_params=np.array([2.0, 0.1]),
        param_bounds=np.array([[0.0, 10.0], [0.0, 2.0]]),
        init_names=("y0_1", "y0_2"),
        true_init=np.array([1.0, 0.0]),
        init_bounds=np.array([[-10.0, 10.0]] * 2),
        H=np.eye(2),
        noise_levels=(0.01, 0.1),
        data_times=np.round(np.arange(21) * 0.25, 12),
        dt=0.05,
    )


_CANDIDATES = {
    "lv-m10": (lv10_f, lv10_jac, 3),
    "lv-m01": (lv01_f, lv01_jac, 4),
    "lv-m00": (lv00_f, lv00_jac, 3),
}


def _candidate(name):
    base = lotka_volterra()
    f, jac, p = _CANDIDATES[name]
    return replace(
        base,
        name=name,
        field=VectorField(f, jac, 2, p, name),
        param_names=base.param_names[:p],
        true_params=base.true_params[:p],
        param_bounds=base.param_bounds[:p],
        staged=False,
    )


def model_selection_candidates():
    """M11 (the true model), M10, M01 and M00, in that order.

    The digits say whether the first and second equation are the true ones.
    The wrong second equation has no ``delta``, so M10 and M00 carry three
    parameters; their ``true_params`` are just the shared LV values.
    """
    m11 = replace(lotka_volterra(), staged=False)
    return {"M11": m11, "M10": _candidate("lv-m10"), "M01": _candidate("lv-m01"), "M00": _candidate("lv-m00")}


REGISTRY = {
    LOTKA_VOLTERRA: lotka_volterra,
    FITZHUGH_NAGUMO: fitzhugh_nagumo,
    SEIR: seir,
    PENDULUM: pendulum,
    "lv-m10": lambda: _candidate("lv-m10"),
    "lv-m01": lambda: _candidate("lv-m01"),
    "lv-m00": lambda: _candidate("lv-m00"),
    LINEAR_TEST: linear_test,
}

_FACTORY_OPTIONS = {LOTKA_VOLTERRA: ("printed_form",)}


def get_problem(name, **overrides):
    """Registry lookup with optional field overrides."""
    if name not in REGISTRY:
        raise KeyError(f"unknown model {name!r}; available: {', '.join(REGISTRY)}")
    options = dict(overrides.pop("options", {}) or {})
    kwargs = {k: options[k] for k in _FACTORY_OPTIONS.get(name, ()) if k in options}
    problem = REGISTRY[name](**kwargs)
    known = {f.name for f in fields(BenchmarkProblem)} - {"name", "field"}
    bad = set(overrides) - known
    if bad:
        raise KeyError(f"unknown problem settings: {sorted(bad)}")
    for key in ("param_names", "init_names", "noise_levels", "sigma2_bounds", "kappa_bounds"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    if options:
        overrides["options"] = {**problem.options, **options}
    return replace(problem, **overrides) if overrides else problem


def problem_from_config(cfg):
    cfg = dict(cfg)
    return get_problem(cfg.pop("model"), **cfg)


def dumps_problem(problem):
    return json.dumps(problem.to_config(), sort_keys=True)


def loads_problem(text):
    return problem_from_config(json.loads(text))
