import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpsgd.problems import (
    PARTITIONED,
    SHARED,
    estimate_sigma_zeta,
    full_gradient,
    logistic_problem,
    quadratic_problem,
)


def central_diff(f, x, h=1e-6):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_deterministic_quadratic():
    p = quadratic_problem(5, 3, spread=0.0, noise_sigma=0.0, center=1.5)
    assert p.known_sigma_sq == 0 and p.known_zeta_sq == 0
    np.testing.assert_array_equal(p.minimizer, np.full(5, 1.5))
    assert p.f_star == 0.0
    x = np.arange(5.0)
    np.testing.assert_array_equal(p.stochastic_gradient(1, x, 0, 0).gradient, x - 1.5)


def test_sigma_formula():
    assert quadratic_problem(10, 2, noise_sigma=0.3).known_sigma_sq == pytest.approx(0.9)


def test_spread_sets_zeta_exactly():
    p = quadratic_problem(8, 4, spread=2.0)
    assert p.known_zeta_sq == pytest.approx(4.0, rel=1e-12)
    assert np.allclose(p.centers.mean(axis=1), 0)


def test_initial_gap_with_zero_mean_centres():
    # f(0) = mean 0.5 ||b_i||^2 = 2; because b_bar = 0 this is also f*, so
    # the initial gap f(0) - f* is 0, not 2
    p = quadratic_problem(8, 4, spread=2.0)
    assert p.loss(np.zeros(8)) == pytest.approx(2.0)
    assert p.f_star == pytest.approx(2.0)
    q = quadratic_problem(20, 8, spread=1.0, center=np.sqrt(0.5))
    assert q.loss(np.zeros(20)) - q.f_star == pytest.approx(5.0)


def test_single_node_and_shared_force_zero_spread():
    assert quadratic_problem(4, 1, spread=3.0).known_zeta_sq == 0
    assert quadratic_problem(4, 5, spread=3.0, strategy=SHARED).known_zeta_sq == 0


def test_quadratic_zero_gradients():
    p = quadratic_problem(6, 4, spread=1.0)
    for i in range(4):
        np.testing.assert_allclose(full_gradient(p, i, p.centers[:, i]), 0, atol=1e-15)
    np.testing.assert_allclose(full_gradient(p, "global", p.center_mean), 0, atol=1e-15)


def test_noise_is_deterministic_and_unbiased():
    p = quadratic_problem(50, 2, noise_sigma=1.0)
    x = np.zeros(50)
    a = p.stochastic_gradient(0, x, 3, seed=9).gradient
    b = p.stochastic_gradient(0, x, 3, seed=9).gradient
    np.testing.assert_array_equal(a, b)
    G = np.mean([p.stochastic_gradient(1, x, k, seed=1).gradient for k in range(400)], axis=0)
    assert np.abs(G).max() < 0.3


def test_batch_reduces_variance():
    p = quadratic_problem(10, 1, noise_sigma=0.3)
    est = estimate_sigma_zeta(p, np.zeros(10), 4000, batch_size=4)
    assert abs(est.sigma_sq - 0.9 / 4) < 3 * est.sigma_sq_se
    assert p.effective_sigma_sq(4) == pytest.approx(0.225)


def test_sigma_estimate_matches_formula():
    p = quadratic_problem(10, 1, noise_sigma=0.3)
    est = estimate_sigma_zeta(p, np.ones(10), 10_000)
    assert abs(est.sigma_sq - 0.9) <= 3 * est.sigma_sq_se
    assert est.sigma_sq_se > 0


def test_zeta_estimate_quadratic_is_exact():
    p = quadratic_problem(6, 5, spread=1.7, noise_sigma=2.0)
    for x in (np.zeros(6), np.full(6, -3.0)):
        est = estimate_sigma_zeta(p, x, 10)
        assert est.zeta_sq == pytest.approx(1.7**2, rel=1e-12)
        assert est.zeta_sq_se == 0


def test_noise_free_sigma_is_zero():
    est = estimate_sigma_zeta(quadratic_problem(4, 3, spread=1.0), np.zeros(4), 5)
    assert est.sigma_sq == 0


def test_zeta_single_node_and_shared_logistic():
    x = np.full(4, 0.2)
    assert estimate_sigma_zeta(logistic_problem(30, 4, 1, seed=2), x, 5).zeta_sq == 0
    shared = logistic_problem(30, 4, 3, seed=2, strategy=SHARED)
    assert estimate_sigma_zeta(shared, x, 5).zeta_sq == pytest.approx(0, abs=1e-28)
    part = logistic_problem(30, 4, 3, seed=2, strategy=PARTITIONED)
    assert estimate_sigma_zeta(part, x, 5).zeta_sq > 0


def test_estimator_rejects_single_draw():
    with pytest.raises(ValueError):
        estimate_sigma_zeta(quadratic_problem(2, 1), np.zeros(2), 1)


def test_logistic_dataset_is_reproducible(tmp_path):
    a = logistic_problem(20, 5, 3, seed=4)
    b = logistic_problem(20, 5, 3, seed=4)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_logistic_two_points_finite_difference():
    p = logistic_problem(1, 3, 2, seed=0)
    x = np.array([0.3, -0.2, 0.5])
    for i in range(2):
        fd = central_diff(lambda z: p.local_loss(i, z), x)
        np.testing.assert_allclose(p.local_gradient(i, x), fd, atol=1e-6)


def test_logistic_minimizer_is_stationary():
    p = logistic_problem(50, 4, 2, seed=1)
    assert np.linalg.norm(p.gradient(p.minimizer)) < 1e-6
    assert p.f_star <= p.loss(np.zeros(4))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_logistic_lipschitz(s):
    p = logistic_problem(20, 5, 2, seed=3)
    r = np.random.default_rng(s)
    x, y = r.normal(size=5) * 3, r.normal(size=5) * 3
    for i in range(2):
        lhs = np.linalg.norm(p.local_gradient(i, x) - p.local_gradient(i, y))
        assert lhs <= p.known_L * np.linalg.norm(x - y) * (1 + 1e-12)


def test_nonfinite_gradient_raises():
    from dpsgd.problems import NonFiniteGradientError

    p = quadratic_problem(3, 2)
    X = np.zeros((3, 2))
    X[1, 1] = np.inf
    with pytest.raises(NonFiniteGradientError) as err:
        p.stochastic_gradients(X, 4, 0)
    assert err.value.k == 4 and err.value.node == 1
