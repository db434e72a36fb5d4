"""Command-line interface: ``fenrir {solve,fit,model-select,bench}``.

Settings come from three layers: built-in defaults, an optional JSON or TOML
file given with ``--config``, and explicit flags, each overriding the one
before.  Exit codes: 0 success, 1 usage error, 2 numerical failure of a
single-run command.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (
    MODEL_SELECTION,
    SUITES,
    ExperimentConfig,
    emit_outputs,
    model_select,
    run_experiment,
    selection_winners,
    suite_configs,
    summarize,
)
from .estimate import FENRIR, RK
from .linearize import EK0, EK1
from .models import REGISTRY, get_problem
from .pnsolver import SolverDivergence, make_grid, smoothed_moments, solve_ivp
from .prior import GaussMarkovPrior

log = logging.getLogger("fenrir")

USAGE_ERROR = 1
NUMERICAL_FAILURE = 2

DEFAULTS = {
    "solve": dict(model="lotka-volterra", params=None, y0=None, t_end=None, dt=None, nu=5, mode=EK1,
                  out="results/solve", plots=True),
    "fit": dict(model="lotka-volterra", noise="low", seed=0, method="both", replicates=20, nu=5, mode=EK1,
                dt=None, out="results/fit", plots=True, workers=None, start=None, fit_init=None),
    "model-select": dict(noise="low", seed=0, replicates=20, nu=5, mode=EK1, dt=None,
                         out="results/model-select", plots=True, workers=None),
    "bench": dict(suite="all", seed=0, replicates=None, out="results/bench", plots=True, workers=None),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text):
    return [float(v) for v in text.replace(",", " ").split()]


def _noise(text):
    try:
        return float(text)
    except ValueError:
        return text


def _start(text):
    name, _, values = text.partition("=")
    if not name or not values:
        raise argparse.ArgumentTypeError("expected NAME=V1,V2,...")
    return {name: _floats(values)}


def build_parser():
    S = argparse.SUPPRESS
    p = _Parser(prog="fenrir", description="ODE parameter inference with a probabilistic-solver prior.")
    p.add_argument("--version", action="version", version=f"fenrir {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON or TOML file with settings")
        sp.add_argument("--out", default=S, help="output directory")
        sp.add_argument("--no-plots", dest="plots", action="store_false", default=S)

    def solver(sp):
        sp.add_argument("--dt", type=float, default=S, help="solver step")
        sp.add_argument("--nu", type=int, default=S, help="number of integrated derivatives")
        sp.add_argument("--mode", choices=(EK0, EK1), default=S)

    sp = sub.add_parser("solve", help="run the probabilistic solver once")
    common(sp)
    solver(sp)
    sp.add_argument("--model", choices=sorted(REGISTRY), default=S)
    sp.add_argument("--params", type=_floats, default=S, help="ODE parameters (default: truth)")
    sp.add_argument("--y0", type=_floats, default=S, help="initial value (default: truth)")
    sp.add_argument("--t-end", dest="t_end", type=float, default=S)

    sp = sub.add_parser("fit", help="replicated parameter estimation")
    common(sp)
    solver(sp)
    sp.add_argument("--model", choices=sorted(REGISTRY), default=S)
    sp.add_argument("--noise", type=_noise, default=S, help="low, high or a variance")
    sp.add_argument("--seed", type=int, default=S)
    sp.add_argument("--method", choices=(FENRIR, RK, "both"), default=S)
    sp.add_argument("--replicates", type=int, default=S)
    sp.add_argument("--workers", type=int, default=S)
    sp.add_argument("--start", type=_start, default=S, help="sweep starting values, NAME=V1,V2,...")
    sp.add_argument("--fit-init", dest="fit_init", action="store_true", default=S)
    sp.add_argument("--known-init", dest="fit_init", action="store_false", default=S)

    sp = sub.add_parser("model-select", help="rank the four Lotka-Volterra candidates")
    common(sp)
    solver(sp)
    sp.add_argument("--noise", type=_noise, default=S)
    sp.add_argument("--seed", type=int, default=S)
    sp.add_argument("--replicates", type=int, default=S)
    sp.add_argument("--workers", type=int, default=S)

    sp = sub.add_parser("bench", help="run a benchmark suite")
    common(sp)
    sp.add_argument("--suite", choices=sorted(SUITES), default=S)
    sp.add_argument("--seed", type=int, default=S)
    sp.add_argument("--replicates", type=int, default=S)
    sp.add_argument("--workers", type=int, default=S)
    return p


def load_config(path):
    """Settings from a ``.json`` or ``.toml`` file (keys use ``_`` like the flag names)."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            cfg = tomllib.loads(text)
        except tomllib.TOMLDecodeError as err:
            raise UsageError(f"{path}: {err}") from None
    else:
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as err:
            raise UsageError(f"{path}: {err}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: expected a table of settings")
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def resolve(command, args):
    """Defaults, then the config file, then explicit flags."""
    explicit = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    settings = dict(DEFAULTS[command])
    if args.config:
        file_cfg = load_config(args.config)
        unknown = set(file_cfg) - set(settings)
        if unknown:
            raise UsageError(f"unknown settings in {args.config}: {sorted(unknown)}")
        settings.update(file_cfg)
    settings.update(explicit)
    return settings


def _experiment(s, model):
    method = s.get("method", FENRIR)
    methods = (FENRIR, RK) if method == "both" else (method,)
    try:
        cfg = ExperimentConfig(
            model=model, noise=s["noise"], replicates=s["replicates"], seed=s["seed"], methods=methods,
            mode=s["mode"], nu=s["nu"], dt=s["dt"], out=s["out"], starts=s.get("start"),
            fit_init=s.get("fit_init"), plots=s["plots"], workers=s["workers"],
        )
        cfg.build_problem().noise(cfg.noise)
        return cfg
    except (TypeError, ValueError, KeyError) as err:
        raise UsageError(str(err)) from None


def _report(records, out):
    for row in summarize(records):
        print(f"{row['candidate']:>16} {row['method']:>7} {row['param']:>8}  "
              f"median {float(row['median_abs_err']):.4g}  [{float(row['q10']):.3g}, {float(row['q90']):.3g}]")
    print(f"wrote {out}")


def cmd_solve(s):
    try:
        problem = get_problem(s["model"])
    except KeyError as err:
        raise UsageError(str(err)) from None
    theta = problem.true_params if s["params"] is None else np.asarray(s["params"], dtype=float)
    y0 = problem.true_y0 if s["y0"] is None else np.asarray(s["y0"], dtype=float)
    if theta.size != problem.field.param_dim or y0.size != problem.d:
        raise UsageError(f"{problem.name} needs {problem.field.param_dim} parameters and {problem.d} initial values")
    t_end = problem.data_times[-1] if s["t_end"] is None else s["t_end"]
    dt = problem.dt if s["dt"] is None else s["dt"]
    if not dt > 0 or not t_end > problem.t0:
        raise UsageError("need dt > 0 and t_end > t0")
    prior = GaussMarkovPrior(s["nu"], problem.d)
    grid = make_grid(problem.t0, t_end, dt)
    try:
        chain, _ = solve_ivp(problem.field, theta, y0, prior, grid, s["mode"], problem.t0)
    except SolverDivergence as err:
        print(f"solver diverged: {err}", file=sys.stderr)
        return NUMERICAL_FAILURE
    means, sqrts = smoothed_moments(chain)
    d = problem.d
    sd = np.sqrt(np.einsum("nij,nij->ni", sqrts, sqrts)[:, :d])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "solution.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"mean_y{i + 1}" for i in range(d)] + [f"sd_y{i + 1}" for i in range(d)])
        for t, m, e in zip(chain.grid, means[:, :d], sd):
            w.writerow(["%.17g" % v for v in (t, *m, *e)])
    if s["plots"]:
        from .bench import _svg
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 3))
        for i in range(d):
            ax.plot(chain.grid, means[:, i], lw=1, label=f"y{i + 1}")
            ax.fill_between(chain.grid, means[:, i] - 2 * sd[:, i], means[:, i] + 2 * sd[:, i], alpha=0.3, lw=0)
        ax.set_xlabel("t")
        ax.legend()
        fig.tight_layout()
        _svg(fig, out / "solution.svg")
        plt.close(fig)
    print(f"{problem.name}: {len(chain)} nodes, y(t_end) = {np.array2string(means[-1, :d], precision=6)}")
    print(f"wrote {out}")
    return 0


def _single_run_failed(cfg, records):
    return cfg.replicates == 1 and not cfg.starts and all(r.status == "failed" for r in records)


def cmd_fit(s):
    if s["model"] not in REGISTRY:
        raise UsageError(f"unknown model {s['model']!r}")
    cfg = _experiment(s, s["model"])
    records = run_experiment(cfg)
    emit_outputs(records, cfg.out, cfg)
    _report(records, cfg.out)
    return NUMERICAL_FAILURE if _single_run_failed(cfg, records) else 0


def cmd_model_select(s):
    cfg = _experiment(s, MODEL_SELECTION)
    records = model_select(cfg)
    emit_outputs(records, cfg.out, cfg)
    wins = selection_winners(records)
    for cand in ("M11", "M10", "M01", "M00"):
        print(f"{cand}: lowest NLL in {sum(w == cand for w in wins.values())} of {cfg.replicates} replicates")
    print(f"wrote {cfg.out}")
    return NUMERICAL_FAILURE if _single_run_failed(cfg, records) else 0


def cmd_bench(s):
    try:
        configs = suite_configs(s["suite"], seed=s["seed"], replicates=s["replicates"], out=s["out"],
                                plots=s["plots"], workers=s["workers"])
    except (KeyError, ValueError) as err:
        raise UsageError(str(err)) from None
    for cfg in configs:
        print(f"== {cfg.model} ({cfg.noise}), {cfg.replicates} replicate(s)")
        records = run_experiment(cfg)
        emit_outputs(records, cfg.out, cfg)
        _report(records, cfg.out)
    return 0


COMMANDS = {"solve": cmd_solve, "fit": cmd_fit, "model-select": cmd_model_select, "bench": cmd_bench}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return USAGE_ERROR
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
        settings = resolve(args.command, args)
        return COMMANDS[args.command](settings)
    except UsageError as err:
        print(f"fenrir: error: {err}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
