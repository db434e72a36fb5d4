import numpy as np
import pytest

from fenrir.linearize import VectorField
from fenrir.models import REGISTRY, get_problem
from fenrir.regression import ObservationSet
from fenrir.rk import RkFailure, rk_fixed, rk_lsq_loss, rk_solve, trajectory

DECAY = VectorField(lambda t, y, th: -y, None, 1, 0)
CONST = VectorField(lambda t, y, th: np.zeros_like(y), None, 2, 0)
OSC = VectorField(lambda t, y, th: np.array([y[1], -y[0]]), None, 2, 0)


def test_exponential_decay():
    sol = rk_solve(DECAY, np.zeros(0), [1.0], (0.0, 1.0))
    assert abs(sol(1.0)[0] - np.exp(-1.0)) <= 1e-7


def test_constant_solution_exact():
    y0 = np.array([0.3, -2.0])
    sol = rk_solve(CONST, np.zeros(0), y0, (0.0, 5.0))
    np.testing.assert_array_equal(sol(np.linspace(0, 5, 11)), np.tile(y0, (11, 1)))


def test_oscillator_period():
    y0 = np.array([1.0, 0.0])
    sol = rk_solve(OSC, np.zeros(0), y0, (0.0, 2 * np.pi))
    assert np.abs(sol(2 * np.pi) - y0).max() <= 1e-6


def test_dense_output_at_steps():
    sol = rk_solve(OSC, np.zeros(0), [1.0, 0.0], (0.0, 10.0))
    assert sol.n_steps > 5
    np.testing.assert_allclose(sol(sol.t_steps), sol.y_steps, rtol=0, atol=1e-12)
    assert (sol.atol, sol.rtol) == (1e-8, 1e-6)


def test_fixed_step_order():
    errs = [abs(rk_fixed(DECAY, np.zeros(0), [1.0], 1.0, n)[0] - np.exp(-1.0)) for n in (4, 8, 16)]
    for a, b in zip(errs, errs[1:]):
        assert a / b >= 2**4 * 0.8


def test_evaluation_outside_span():
    sol = rk_solve(DECAY, np.zeros(0), [1.0], (0.0, 1.0))
    with pytest.raises(ValueError):
        sol(1.5)


def test_blow_up_is_typed():
    blow = VectorField(lambda t, y, th: y * y, None, 1, 0)
    with pytest.raises(RkFailure):
        rk_solve(blow, np.zeros(0), [1.0], (0.0, 2.0))


def test_bad_arguments():
    with pytest.raises(ValueError):
        rk_solve(DECAY, np.zeros(0), [1.0], (0.0, 1.0), atol=0.0)
    with pytest.raises(ValueError):
        rk_solve(DECAY, np.zeros(0), [1.0], (1.0, 1.0))


# the wrong model-selection candidates have no truth of their own (their
# "true" parameters are the shared LV values, at which M01 and M00 blow up)
@pytest.mark.parametrize("name", sorted(set(REGISTRY) - {"lv-m01", "lv-m00"}))
def test_loss_vanishes_at_truth(name):
    p = get_problem(name)
    clean = trajectory(p.field, p.true_params, p.true_y0, p.data_times, p.t0)
    obs = ObservationSet(p.data_times, clean @ p.H.T, p.H)
    assert rk_lsq_loss(p, p.true_params, obs) <= 1e-10


def test_loss_empty_and_failure():
    p = get_problem("lotka-volterra")
    assert rk_lsq_loss(p, p.true_params, ObservationSet(np.zeros(0), np.zeros((0, 2)), p.H)) == 0.0
    blow = VectorField(lambda t, y, th: y * y, None, 2, 4)
    from dataclasses import replace

    q = replace(p, field=blow)
    obs = ObservationSet(p.data_times, np.ones((p.data_times.size, 2)), p.H)
    assert rk_lsq_loss(q, p.true_params, obs) == np.inf


@pytest.mark.parametrize("name", sorted(set(REGISTRY) - {"lv-m01", "lv-m00"}))
def test_compiled_route_matches_scipy(name):
    p = get_problem(name)
    assert p.field.jitted
    a = trajectory(p.field, p.true_params, p.true_y0, p.data_times, p.t0, compiled=False)
    b = trajectory(p.field, p.true_params, p.true_y0, p.data_times, p.t0, compiled=True)
    assert np.abs(a - b).max() <= 1e-10 * max(1.0, np.abs(a).max())


def test_compiled_route_failures():
    p = get_problem("lv-m00")
    with pytest.raises(RkFailure):
        trajectory(p.field, p.true_params, p.true_y0, p.data_times, p.t0, compiled=True)
    q = get_problem("fitzhugh-nagumo")
    with pytest.raises(RkFailure):
        trajectory(q.field, np.array([0.2, 0.2, 1e-4]), q.true_y0, q.data_times, q.t0, max_steps=100)
    with pytest.raises(ValueError):
        trajectory(q.field, q.true_params, q.true_y0, np.array([1.0, 0.5, 2.0]), q.t0, compiled=True)
