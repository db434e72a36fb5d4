import numpy as np
import pytest

from fenrir.models import (
    REGISTRY,
    dumps_problem,
    fitzhugh_nagumo,
    get_problem,
    loads_problem,
    lotka_volterra,
    model_selection_candidates,
    pendulum,
    seir,
)


def test_registry_names():
    assert set(REGISTRY) == {
        "lotka-volterra", "fitzhugh-nagumo", "seir", "pendulum", "lv-m10", "lv-m01", "lv-m00", "linear-test",
    }


def test_lotka_volterra_setup():
    p = lotka_volterra()
    np.testing.assert_array_equal(p.true_params, [2, 1, 4, 1])
    np.testing.assert_array_equal(p.true_y0, [5, 3])
    np.testing.assert_allclose(p.data_times, np.arange(21) / 10)
    assert p.noise("low") == 0.01 and p.noise("high") == 0.25
    assert p.dt == 5e-3 and p.staged and not p.diffusion_scan
    assert p.sigma2_bounds == (1e-6, 1e2) and p.kappa_bounds == (1e-20, 1e50)


def test_lotka_volterra_examples():
    p = lotka_volterra()
    th = p.true_params
    np.testing.assert_allclose(p.field(0, [5.0, 3.0], th), [-5, 3])
    np.testing.assert_allclose(p.field(0, [0.0, 0.0], th), [0, 0])
    np.testing.assert_allclose(p.field.jacobian(0, [5.0, 3.0], th), [[-1, -5], [3, 1]])


def test_lotka_volterra_printed_form():
    p = get_problem("lotka-volterra", options={"printed_form": True})
    # second equation -gamma*y1 + delta*y1*y2
    np.testing.assert_allclose(p.field(0, [5.0, 3.0], p.true_params), [-5, -20 + 15])


def test_fitzhugh_nagumo_examples():
    p = fitzhugh_nagumo()
    th = p.true_params
    np.testing.assert_array_equal(p.true_y0, [-1, 1])
    # c(y1 - y1^3/3 + y2) = 3 * 1/3 and -(y1 - a + b y2)/c = -(-1 - 0.2 + 0.2)/3
    np.testing.assert_allclose(p.field(0, [-1.0, 1.0], th), [1.0, 1.0 / 3.0])
    np.testing.assert_allclose(p.field(0, [0.0, 0.0], [0.0, 0.2, 3.0]), [0, 0])
    assert p.field.jacobian(0, [-1.0, 1.0], th)[0, 0] == 0.0


def test_seir_examples(rng):
    p = seir()
    th = p.true_params
    assert abs(p.true_y0[0] - 0.99989) < 1e-15
    np.testing.assert_array_equal(p.field(0, [1.0, 0, 0, 0], th), 0.0)
    for _ in range(10):
        y = rng.uniform(size=4)
        assert abs(p.field(0, y, th).sum()) < 1e-15
    np.testing.assert_array_equal(p.H, [[0, 0, 1, 0], [0, 0, 0, 1]])
    assert p.noise("low") == 5e-4


def test_pendulum_examples():
    p = pendulum()
    np.testing.assert_allclose(p.field(0, [0.0, 1.7], [1.0]), [1.7, 0])
    np.testing.assert_allclose(p.field(0, [np.pi / 2, 0.0], [1.0]), [0, -9.81])
    assert p.field.jacobian(0, [0.0, 0.0], [1.0])[1, 0] == -9.81
    assert p.data_times.size == 1001 and p.dt == 0.1


def test_candidates():
    c = model_selection_candidates()
    assert list(c) == ["M11", "M10", "M01", "M00"]
    lv = lotka_volterra()
    y = np.array([5.0, 3.0])
    np.testing.assert_array_equal(c["M11"].field(0, y, lv.true_params), lv.field(0, y, lv.true_params))
    np.testing.assert_allclose(c["M00"].field(0, y, [2.0, 1.0, 4.0]), [47, -12])
    # M10 keeps the true first equation and replaces the second
    m10 = c["M10"].field(0, y, [2.0, 1.0, 4.0])
    assert m10[0] == lv.field(0, y, lv.true_params)[0] and m10[1] == -12
    m01 = c["M01"].field(0, y, lv.true_params)
    assert m01[0] == 47 and m01[1] == lv.field(0, y, lv.true_params)[1]


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_problem_invariants(name):
    p = get_problem(name)
    lo, hi = p.param_bounds.T
    assert np.all((lo <= p.true_params) & (p.true_params <= hi))
    assert p.H.shape[1] == p.d
    assert len(p.param_names) == p.true_params.size == p.field.param_dim


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_config_round_trip(name):
    p = get_problem(name)
    q = loads_problem(dumps_problem(p))
    assert dumps_problem(q) == dumps_problem(p)
    assert q.field.f is p.field.f


def test_override_and_unknown_model():
    p = get_problem("pendulum", dt=0.05, fit_init=False)
    assert p.dt == 0.05 and not p.fit_init
    with pytest.raises(KeyError):
        get_problem("van-der-pol")
    with pytest.raises(KeyError):
        get_problem("pendulum", colour="red")
