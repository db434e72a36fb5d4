import csv
from dataclasses import replace

import numpy as np
import pytest

from fenrir import bench
from fenrir.bench import (
    FITS_COLUMNS,
    MODEL_SELECTION,
    ExperimentConfig,
    emit_outputs,
    generate_data,
    run_experiment,
    suite_configs,
    summarize,
    sweep_minimum,
)
from fenrir.estimate import FENRIR, Objective, ParamSpace, scan_diffusion, true_trajectory
from fenrir.models import get_problem

LINEAR = dict(model="linear-test", nu=2, replicates=2, seed=3)


def _read(path):
    lines = path.read_text().splitlines()
    head = [ln for ln in lines if ln.startswith("#")]
    rows = list(csv.DictReader([ln for ln in lines if not ln.startswith("#")]))
    return head, rows


@pytest.fixture(scope="module")
def linear_records():
    return run_experiment(ExperimentConfig(**LINEAR, plots=False))


def test_generate_data_noise_free():
    p = get_problem("seir")
    obs = generate_data(p, 0.0, 5)
    np.testing.assert_array_equal(obs.values, true_trajectory(p) @ p.H.T)


def test_generate_data_seeded():
    p = get_problem("lotka-volterra")
    a, b = generate_data(p, 0.25, 9), generate_data(p, 0.25, 9)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, generate_data(p, 0.25, 10).values)
    with pytest.raises(ValueError):
        generate_data(p, -1.0, 0)


def test_generate_data_variance():
    p = get_problem("lotka-volterra")
    obs = generate_data(p, 0.25, 0)
    r = (obs.values - true_trajectory(p) @ p.H.T).ravel()
    n = r.size
    se = 0.25 * np.sqrt(2.0 / (n - 1))
    assert abs(np.var(r, ddof=1) - 0.25) <= 3 * se


def test_config_validation_and_hash():
    cfg = ExperimentConfig(**LINEAR)
    assert cfg.seeds == [3, 4]
    assert cfg.hash() == replace(cfg, out="elsewhere", workers=4, plots=False).hash()
    assert cfg.hash() != replace(cfg, seed=4).hash()
    for bad in (dict(replicates=0), dict(methods=("gd",)), dict(mode="ek2"), dict(nu=0), dict(dt=-1.0),
                dict(starts={"a": [1], "b": [2]})):
        with pytest.raises(ValueError):
            ExperimentConfig(**bad)


def test_records(linear_records):
    recs = linear_records
    assert len(recs) == 4
    assert [(r.method, r.replicate) for r in recs] == [("fenrir", 0), ("fenrir", 1), ("rk", 0), ("rk", 1)]
    for r in recs:
        assert r.status != "failed"
        assert np.isfinite(r.nll) and np.isfinite(r.trmse)
        assert set(r.abs_errors) == {"omega", "zeta", "y0_1", "y0_2"}
        assert r.trmse < 0.1


def test_outputs_and_schema(tmp_path, linear_records):
    cfg = ExperimentConfig(**LINEAR, plots=False)
    paths = emit_outputs(linear_records, tmp_path, cfg)
    assert {p.name for p in paths} == {"fits.csv", "summary.csv"}
    assert not list(tmp_path.glob("*.svg"))
    head, rows = _read(tmp_path / "fits.csv")
    assert head == ["# fenrir 0.1.0", f"# config {cfg.hash()}"]
    assert tuple(rows[0]) == FITS_COLUMNS
    # floats carry 17 significant digits and round-trip exactly
    r = linear_records[0]
    assert float(rows[0]["nll"]) == r.nll
    values = dict(kv.split("=") for kv in rows[0]["params"].split(";"))
    assert float(values["omega"]) == r.params[0]
    _, summ = _read(tmp_path / "summary.csv")
    assert {"param", "median_abs_err", "q10", "q90"} <= set(summ[0])
    assert {s["param"] for s in summ} == {"omega", "zeta", "y0_1", "y0_2", "trmse"}


def test_outputs_byte_identical(tmp_path):
    cfg = ExperimentConfig(**dict(LINEAR, replicates=1), plots=False)
    emit_outputs(run_experiment(cfg), tmp_path / "a", cfg)
    emit_outputs(run_experiment(cfg), tmp_path / "b", cfg)
    for name in ("fits.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_workers_do_not_change_results(linear_records):
    par = run_experiment(ExperimentConfig(**LINEAR, plots=False, workers=2))
    assert [r.row() for r in par] == [r.row() for r in linear_records]


def test_plots(tmp_path, linear_records):
    cfg = ExperimentConfig(**LINEAR)
    paths = emit_outputs(linear_records, tmp_path, cfg)
    svgs = sorted(p.name for p in paths if p.suffix == ".svg")
    assert svgs == ["posterior_linear-test.svg", "sweep_omega.svg"]
    assert (tmp_path / "sweep_omega.svg").read_text().lstrip().startswith("<?xml")


def test_output_errors(tmp_path, linear_records):
    cfg = ExperimentConfig(**LINEAR, plots=False)
    with pytest.raises(ValueError):
        emit_outputs([], tmp_path, cfg)
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_outputs(linear_records, blocker / "sub", cfg)


def test_failed_replicate_keeps_batch(monkeypatch, tmp_path):
    real = bench.fit_one

    def flaky(problem, obs, method, seed, cfg, *a, **kw):
        if seed == 4 and method == FENRIR:
            raise np.linalg.LinAlgError("boom")
        return real(problem, obs, method, seed, cfg, *a, **kw)

    monkeypatch.setattr(bench, "fit_one", flaky)
    cfg = ExperimentConfig(**LINEAR, plots=False, workers=1)
    recs = run_experiment(cfg)
    assert [r.status == "failed" for r in recs] == [False, True, False, False]
    emit_outputs(recs, tmp_path, cfg)
    _, summ = _read(tmp_path / "summary.csv")
    row = next(s for s in summ if s["method"] == "fenrir" and s["param"] == "omega")
    assert (row["n"], row["n_finite"]) == ("2", "1")


def test_duplicate_candidate_tie():
    p = get_problem("linear-test")
    cfg = ExperimentConfig(model=MODEL_SELECTION, nu=2, replicates=1)
    obs = generate_data(p, p.noise("low"), 0)
    recs = bench._select_replicate(cfg, 0, 0, obs, {"first": p, "second": p})
    assert abs(recs[0].nll - recs[1].nll) <= 1e-9 * max(1.0, abs(recs[0].nll))
    assert [(r.candidate, r.rank) for r in recs] == [("first", 1), ("second", 2)]


def test_summary_quantiles():
    rec = bench.RunRecord("h", "m", "c", "rk", 0, 0, None, "converged", 1.0, 0.5, ("a",), np.ones(1), {"a": 2.0})
    recs = [replace(rec, replicate=i, abs_errors={"a": float(i)}) for i in range(11)]
    row = next(s for s in summarize(recs) if s["param"] == "a")
    assert float(row["median_abs_err"]) == 5.0
    assert float(row["q10"]) == 1.0 and float(row["q90"]) == 9.0


def test_suites():
    cfgs = suite_configs("all", seed=2, out="x")
    assert [c.model for c in cfgs] == ["lotka-volterra"] * 2 + ["fitzhugh-nagumo"] * 2 + [
        "seir", "pendulum", MODEL_SELECTION]
    pend = cfgs[5]
    assert pend.replicates == 1 and pend.starts["L"][0] == 0.5 and pend.starts["L"][-1] == 10.0
    assert all(c.seed == 2 for c in cfgs)
    assert cfgs[0].out.endswith("lotka-volterra-low")
    with pytest.raises(KeyError):
        suite_configs("nope")


@pytest.mark.slow
def test_pendulum_sweep_minimum():
    p = get_problem("pendulum", fit_init=False)
    obs = generate_data(p, p.noise("low"), 0)
    space = ParamSpace.from_problem(p, FENRIR)
    obj = Objective(p, obs, FENRIR, space)
    x = scan_diffusion(obj, space.assemble([1.0], sigma2=p.noise("low"), kappa=1.0), per_decade=2)
    L, grid, vals = sweep_minimum(p, obs, space, x, "L", 0.1, 10.0)
    assert abs(L - 1.0) <= 1e-2


@pytest.mark.slow
def test_noise_free_model_selection():
    cfg = ExperimentConfig(model=MODEL_SELECTION, noise=1e-6, replicates=2, methods=(FENRIR,), plots=False)
    recs = run_experiment(cfg)
    for rep in range(2):
        mine = sorted((r for r in recs if r.replicate == rep), key=lambda r: r.rank)
        assert mine[0].candidate == "M11" and mine[0].nll < mine[1].nll
