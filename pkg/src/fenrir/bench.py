"""Experiment plumbing: synthetic data, replicated fits, model selection and output files.

Every replicate ``r`` uses seed ``seed + r``.  The data stream is
``numpy.random.default_rng([seed, 0])`` and the starting-point stream is
``default_rng([seed, 1])``; both are PCG64, so results depend only on the
configuration.
"""

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from . import __version__
from .estimate import (
    FENRIR,
    MAXITER,
    PENALTY,
    RK,
    JOINT_STAGE,
    Objective,
    ParamSpace,
    fit,
    fitted_state,
    init_params,
    schedule_for,
    trmse,
    true_trajectory,
)
from .linearize import EK0, EK1
from .models import get_problem, model_selection_candidates
from .pnsolver import SolverDivergence, make_grid, solve_ivp
from .prior import GaussMarkovPrior
from .regression import DegenerateInnovation, ObservationSet, fenrir_posterior
from .rk import RkFailure

log = logging.getLogger(__name__)

MODEL_SELECTION = "model-selection"
FITS_COLUMNS = (
    "config_hash", "model", "candidate", "method", "replicate", "seed", "start",
    "status", "rank", "nll", "trmse", "n_evals", "params", "abs_errors",
)
SUMMARY_COLUMNS = ("candidate", "method", "param", "n", "n_finite", "median_abs_err", "q10", "q90")


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a model, a noise level and a number of replicates.

    ``noise`` is ``"low"``, ``"high"`` or a variance.  ``starts`` maps one
    ODE parameter name to a list of starting values; every replicate is then
    fitted once per start.  ``model = "model-selection"`` fits the four
    Lotka--Volterra candidates to each dataset instead.
    """

    model: str = "lotka-volterra"
    noise: object = "low"
    replicates: int = 20
    seed: int = 0
    methods: tuple = (FENRIR, RK)
    mode: str = EK1
    nu: int = 5
    dt: Optional[float] = None
    out: str = "results"
    starts: Optional[dict] = None
    fit_init: Optional[bool] = None
    maxiter: int = MAXITER
    plots: bool = True
    workers: Optional[int] = None
    problem: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.replicates) < 1:
            raise ValueError("replicate count must be at least 1")
        methods = (self.methods,) if isinstance(self.methods, str) else tuple(self.methods)
        for m in methods:
            if m not in (FENRIR, RK):
                raise ValueError(f"unknown method {m!r}")
        if self.mode not in (EK0, EK1):
            raise ValueError(f"unknown mode {self.mode!r}")
        if int(self.nu) < 1:
            raise ValueError("nu must be at least 1")
        if self.dt is not None and not float(self.dt) > 0:
            raise ValueError("dt must be positive")
        if self.starts is not None and len(self.starts) != 1:
            raise ValueError("starts must name exactly one parameter")
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "replicates", int(self.replicates))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "nu", int(self.nu))

    @property
    def seeds(self):
        return [self.seed + r for r in range(self.replicates)]

    def hash(self):
        """Digest of everything that affects the numbers (not paths or workers)."""
        d = asdict(self)
        for k in ("out", "plots", "workers"):
            d.pop(k)
        d["methods"] = list(d["methods"])
        text = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def build_problem(self):
        if self.model == MODEL_SELECTION:
            return get_problem("lotka-volterra", **self.problem)
        return get_problem(self.model, **self.problem)


@dataclass
class RunRecord:
    """One fit: a replicate of one candidate model with one method."""

    config_hash: str
    model: str
    candidate: str
    method: str
    replicate: int
    seed: int
    start: Optional[float]
    status: str
    nll: float
    trmse: float
    names: tuple
    params: np.ndarray
    abs_errors: dict
    n_evals: int = 0
    rank: int = 0
    wall_time: float = 0.0

    def sort_key(self):
        return (self.candidate, self.method, self.replicate, -np.inf if self.start is None else self.start)

    def row(self):
        return {
            "config_hash": self.config_hash,
            "model": self.model,
            "candidate": self.candidate,
            "method": self.method,
            "replicate": str(self.replicate),
            "seed": str(self.seed),
            "start": "" if self.start is None else _fmt(self.start),
            "status": self.status,
            "rank": str(self.rank),
            "nll": _fmt(self.nll),
            "trmse": _fmt(self.trmse),
            "n_evals": str(self.n_evals),
            "params": ";".join(f"{n}={_fmt(v)}" for n, v in zip(self.names, self.params)),
            "abs_errors": ";".join(f"{n}={_fmt(v)}" for n, v in self.abs_errors.items()),
        }


def _fmt(x):
    return "%.17g" % float(x)


def generate_data(problem, sigma2, seed, times=None):
    """Noisy measurements ``H y(t) + v`` of the tight-tolerance truth.

    Raises
    ------
    RkFailure
        If the truth cannot be integrated.
    """
    if sigma2 < 0:
        raise ValueError("noise variance must be non-negative")
    times = problem.data_times if times is None else np.asarray(times, dtype=float)
    truth = true_trajectory(problem, times)
    clean = truth @ problem.H.T
    rng = np.random.default_rng([int(seed), 0])
    values = clean + np.sqrt(sigma2) * rng.standard_normal(clean.shape)
    k = problem.H.shape[0]
    return ObservationSet(times, values, problem.H, sigma2 * np.eye(k))


def _abs_errors(problem, space, x):
    theta, init, _, _ = space.split(x)
    out = {}
    if len(problem.true_params) == len(theta):
        out.update({n: abs(v - t) for n, v, t in zip(problem.param_names, theta, problem.true_params)})
    if init is not None:
        out.update({n: abs(v - t) for n, v, t in zip(problem.init_names, init, problem.true_init)})
    return out


def fit_one(problem, obs, method, seed, cfg, start=None, truth=None, schedule=None):
    """Fit one problem to one dataset; returns ``(FitResult, ParamSpace, Objective)``."""
    space = ParamSpace.from_problem(problem, method, cfg.fit_init)
    obj = Objective(problem, obs, method, space, nu=cfg.nu, mode=cfg.mode, dt=cfg.dt)
    x0 = init_params(space, seed, obs, problem.t0)
    if start is not None:
        (name, value), = start.items()
        i = space.names.index(name)
        x0[i] = value
        x0 = space.clip(x0)
    if schedule is None:
        schedule = schedule_for(problem) if method == FENRIR else [JOINT_STAGE]
    res = fit(obj, space, x0, schedule, seed=seed, maxiter=cfg.maxiter)
    return res, space, obj


def _record(cfg, problem, candidate, method, rep, seed, start, res, space, truth):
    err = trmse(problem, res, space, truth) if res.status != "failed" else np.inf
    return RunRecord(
        config_hash=cfg.hash(),
        model=cfg.model,
        candidate=candidate,
        method=method,
        replicate=rep,
        seed=seed,
        start=start,
        status=res.status,
        nll=min(res.nll, PENALTY),
        trmse=err,
        names=res.names,
        params=res.params,
        abs_errors=_abs_errors(problem, space, res.params),
        n_evals=res.n_evals,
        wall_time=res.wall_time,
    )


def _failed_record(cfg, candidate, method, rep, seed, start, reason):
    log.warning("replicate %d (%s, %s) failed: %s", rep, candidate, method, reason)
    return RunRecord(cfg.hash(), cfg.model, candidate, method, rep, seed, start, "failed",
                     PENALTY, np.inf, (), np.zeros(0), {})


def _run_replicate(cfg, rep):
    """All fits belonging to replicate ``rep``; never raises."""
    seed = cfg.seed + rep
    problem = cfg.build_problem()
    sigma2 = problem.noise(cfg.noise)
    try:
        obs = generate_data(problem, sigma2, seed)
    except RkFailure as err:
        return [_failed_record(cfg, problem.name, m, rep, seed, None, f"truth: {err}") for m in cfg.methods]
    if cfg.model == MODEL_SELECTION:
        return _select_replicate(cfg, rep, seed, obs)
    truth = true_trajectory(problem)
    starts = [None]
    if cfg.starts:
        (name, values), = cfg.starts.items()
        starts = [{name: float(v)} for v in values]
    out = []
    for method in cfg.methods:
        for start in starts:
            sval = None if start is None else next(iter(start.values()))
            try:
                res, space, _ = fit_one(problem, obs, method, seed, cfg, start, truth)
                out.append(_record(cfg, problem, problem.name, method, rep, seed, sval, res, space, truth))
            except (ValueError, RkFailure, SolverDivergence, DegenerateInnovation, np.linalg.LinAlgError) as err:
                out.append(_failed_record(cfg, problem.name, method, rep, seed, sval, err))
    return out


def _select_replicate(cfg, rep, seed, obs, candidates=None):
    candidates = model_selection_candidates() if candidates is None else candidates
    truth = true_trajectory(next(iter(candidates.values())))
    out = []
    for name, problem in candidates.items():
        try:
            res, space, _ = fit_one(problem, obs, FENRIR, seed, cfg, schedule=[JOINT_STAGE])
            out.append(_record(cfg, problem, name, FENRIR, rep, seed, None, res, space, truth))
        except (ValueError, RkFailure, SolverDivergence, DegenerateInnovation, np.linalg.LinAlgError) as err:
            out.append(_failed_record(cfg, name, FENRIR, rep, seed, None, err))
    # stable sort: ties go to the earlier candidate in registry order
    for rank, i in enumerate(sorted(range(len(out)), key=lambda i: out[i].nll), start=1):
        out[i].rank = rank
    return out


def _map_replicates(cfg):
    reps = range(cfg.replicates)
    workers = cfg.workers or os.cpu_count() or 1
    workers = min(workers, cfg.replicates)
    if workers <= 1:
        chunks = [_run_replicate(cfg, r) for r in reps]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_replicate, [cfg] * cfg.replicates, reps))
    records = [rec for chunk in chunks for rec in chunk]
    return sorted(records, key=RunRecord.sort_key)


def run_experiment(cfg):
    """Fit every replicate with every method; failures become rows with a status."""
    if cfg.model == MODEL_SELECTION:
        return model_select(cfg)
    return _map_replicates(cfg)


def model_select(cfg):
    """Fit the four Lotka--Volterra candidates to each replicate's data.

    Each record carries the candidate's rank within its replicate; rank 1 is
    the lowest NLL.
    """
    if cfg.model != MODEL_SELECTION:
        cfg = replace(cfg, model=MODEL_SELECTION)
    return _map_replicates(cfg)


def selection_winners(records):
    """Winning candidate per replicate."""
    return {r.replicate: r.candidate for r in records if r.rank == 1}


# -- summaries ---------------------------------------------------------------------------------
def _quantiles(values):
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return np.nan, np.nan, np.nan, 0
    return float(np.median(v)), float(np.quantile(v, 0.1)), float(np.quantile(v, 0.9)), v.size


def summarize(records):
    """Rows of median and 10%/90% quantiles of absolute errors per parameter and of tRMSE."""
    groups = {}
    for r in records:
        groups.setdefault((r.candidate, r.method), []).append(r)
    rows = []
    for (cand, method), recs in sorted(groups.items()):
        names = []
        for r in recs:
            names += [n for n in r.abs_errors if n not in names]
        for name in names + ["trmse"]:
            if name == "trmse":
                vals = [r.trmse for r in recs]
            else:
                vals = [r.abs_errors.get(name, np.nan) for r in recs]
            med, q10, q90, nf = _quantiles(vals)
            rows.append({
                "candidate": cand, "method": method, "param": name, "n": str(len(recs)),
                "n_finite": str(nf), "median_abs_err": _fmt(med), "q10": _fmt(q10), "q90": _fmt(q90),
            })
    return rows


def _write_csv(path, columns, rows, header_lines):
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def emit_outputs(records, out_dir, cfg, plots=None, data=None):
    """Write ``fits.csv``, ``summary.csv`` and, if requested, SVG plots.

    ``data`` optionally maps a replicate index to its ObservationSet for the
    posterior plot; by default replicate 0 is regenerated from its seed.
    Returns the list of written paths.
    """
    if not records:
        raise ValueError("no records to write")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = [f"fenrir {__version__}", f"config {cfg.hash()}"]
    records = sorted(records, key=RunRecord.sort_key)
    paths = [out / "fits.csv", out / "summary.csv"]
    _write_csv(paths[0], FITS_COLUMNS, [r.row() for r in records], header)
    _write_csv(paths[1], SUMMARY_COLUMNS, summarize(records), header)
    if cfg.model == MODEL_SELECTION:
        wins = selection_winners(records)
        rows = [{"candidate": c, "wins": str(sum(w == c for w in wins.values()))}
                for c in model_selection_candidates()]
        paths.append(out / "selection.csv")
        _write_csv(paths[-1], ("candidate", "wins"), rows, header)
    plots = cfg.plots if plots is None else plots
    if plots:
        paths += _plot_experiment(records, out, cfg, data)
    return paths


# -- landscapes and plots ------------------------------------------------------------------------
def nll_sweep(problem, obs, space, x, name, values, method=FENRIR, nu=5, mode=EK1, dt=None):
    """Objective values along one parameter with the others held at ``x``."""
    obj = Objective(problem, obs, method, space, nu=nu, mode=mode, dt=dt)
    i = space.names.index(name)
    out = np.empty(len(values))
    for j, v in enumerate(values):
        xi = np.array(x, dtype=float)
        xi[i] = v
        with np.errstate(all="ignore"):
            out[j] = obj.value_natural(xi)
    return out


def sweep_minimum(problem, obs, space, x, name, lo, hi, n=200, method=FENRIR, **kw):
    """Grid search on a log grid over ``[lo, hi]``, refined by a bounded 1-D search."""
    grid = np.geomspace(lo, hi, n)
    vals = nll_sweep(problem, obs, space, x, name, grid, method, **kw)
    j = int(np.nanargmin(np.where(np.isfinite(vals), vals, np.nan)))
    a, b = grid[max(j - 1, 0)], grid[min(j + 1, n - 1)]

    def f(v):
        r = nll_sweep(problem, obs, space, x, name, [v], method, **kw)[0]
        return r if np.isfinite(r) else PENALTY

    res = minimize_scalar(f, bounds=(a, b), method="bounded", options={"xatol": 1e-6 * b})
    return float(res.x), grid, vals


def _svg(fig, path):
    import matplotlib

    matplotlib.rcParams["svg.hashsalt"] = "fenrir"
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_posterior(problem, obs, space, x, path, nu=5, mode=EK1, dt=None, title=None):
    """Posterior mean with a two-standard-deviation band, against the data."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    theta, y0 = fitted_state(problem, space, x)
    _, _, s2, kappa = space.split(x)
    prior = GaussMarkovPrior(nu, problem.d)
    grid = make_grid(problem.t0, obs.times[-1], problem.dt if dt is None else dt, obs.times)
    chain, _ = solve_ivp(problem.field, theta, y0, prior, grid, mode, problem.t0)
    post = fenrir_posterior(chain, obs, kappa, s2)
    d = problem.d
    sd = np.sqrt(np.clip(np.einsum("nii->ni", post.covs)[:, :d], 0.0, None))
    fig, axes = plt.subplots(d, 1, figsize=(6, 1.8 * d + 0.6), sharex=True, squeeze=False)
    for i, ax in enumerate(axes[:, 0]):
        m = post.means[:, i]
        ax.fill_between(post.grid, m - 2 * sd[:, i], m + 2 * sd[:, i], alpha=0.3, lw=0)
        ax.plot(post.grid, m, lw=1)
        for r, row in enumerate(obs.H):
            if row[i] == 1.0 and np.count_nonzero(row) == 1:
                ax.plot(obs.times, obs.values[:, r], ".", ms=2, color="k")
        ax.set_ylabel(f"y{i + 1}")
    axes[-1, 0].set_xlabel("t")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    _svg(fig, path)
    plt.close(fig)


def plot_sweep(grid, curves, path, name, truth=None):
    """Line chart of objective curves ``{label: values}`` over ``grid`` (log x axis)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(curves), figsize=(4 * len(curves), 3), squeeze=False)
    for ax, (label, vals) in zip(axes[0], curves.items()):
        ax.plot(grid, np.where(np.isfinite(vals), vals, np.nan), lw=1)
        if truth is not None:
            ax.axvline(truth, ls="--", lw=0.8, color="k")
        ax.set_xscale("log")
        ax.set_xlabel(name)
        ax.set_title(label)
    fig.tight_layout()
    _svg(fig, path)
    plt.close(fig)


def _plot_experiment(records, out, cfg, data):
    written = []
    if cfg.model == MODEL_SELECTION:
        cands = model_selection_candidates()
        problem = cands["M11"]
    else:
        cands = None
        problem = cfg.build_problem()
    recs = [r for r in records if r.method == FENRIR and r.replicate == 0 and r.status != "failed" and r.names]
    if not recs:
        return written
    obs = (data or {}).get(0) or generate_data(problem, problem.noise(cfg.noise), cfg.seed)
    for r in recs:
        prob = cands[r.candidate] if cands else problem
        space = ParamSpace.from_problem(prob, FENRIR, cfg.fit_init)
        if space.names != tuple(r.names):
            continue
        suffix = r.candidate if r.start is None else f"{r.candidate}_start{r.start:g}"
        path = out / f"posterior_{suffix}.svg"
        try:
            plot_posterior(prob, obs, space, r.params, path, cfg.nu, cfg.mode, cfg.dt, title=suffix)
            written.append(path)
        except (SolverDivergence, DegenerateInnovation, np.linalg.LinAlgError) as err:
            log.warning("posterior plot skipped: %s", err)
    if cands:
        return written
    # objective landscape along the first ODE parameter, at the best fit's noise and diffusion
    r = min(recs, key=lambda r: r.nll)
    space = ParamSpace.from_problem(problem, FENRIR, cfg.fit_init)
    name = problem.param_names[0]
    t = problem.true_params[0]
    lo, hi = (0.1, 10.0) if t == 1.0 else (t / 10, t * 10)
    grid = np.geomspace(lo, hi, 120)
    curves = {"fenrir NLL": nll_sweep(problem, obs, space, r.params, name, grid, FENRIR, cfg.nu, cfg.mode, cfg.dt)}
    rk_space = ParamSpace.from_problem(problem, RK, cfg.fit_init)
    rk_x = np.array([v for n, v in zip(r.names, r.params) if n in rk_space.names])
    curves["rk squared error"] = nll_sweep(problem, obs, rk_space, rk_x, name, grid, RK)
    path = out / f"sweep_{name}.svg"
    plot_sweep(grid, curves, path, name, truth=t)
    written.append(path)
    return written


# -- bench suites ----------------------------------------------------------------------------------
SUITES = {
    "lv": [dict(model="lotka-volterra", noise="low"), dict(model="lotka-volterra", noise="high")],
    "fhn": [dict(model="fitzhugh-nagumo", noise="low"), dict(model="fitzhugh-nagumo", noise="high")],
    "seir": [dict(model="seir", noise="low")],
    "pendulum": [dict(model="pendulum", noise="low", replicates=1, fit_init=False,
                      starts={"L": [0.5 * i for i in range(1, 21)]})],
    "model-selection": [dict(model=MODEL_SELECTION, noise="low", methods=(FENRIR,))],
}
SUITES["all"] = [c for k in ("lv", "fhn", "seir", "pendulum", "model-selection") for c in SUITES[k]]


def suite_configs(suite, **common):
    """Experiment configurations of a bench suite; ``common`` overrides each one."""
    if suite not in SUITES:
        raise KeyError(f"unknown suite {suite!r}; available: {', '.join(SUITES)}")
    out = []
    for spec in SUITES[suite]:
        kw = {**spec, **{k: v for k, v in common.items() if v is not None}}
        if spec.get("replicates") == 1 and "starts" in spec:
            kw["replicates"] = spec["replicates"]
        base = Path(kw.pop("out", "results"))
        sub = f"{kw['model']}-{kw['noise']}" if kw["model"] != MODEL_SELECTION else MODEL_SELECTION
        out.append(ExperimentConfig(out=str(base / sub), **kw))
    return out
