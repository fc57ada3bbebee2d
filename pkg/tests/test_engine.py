import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpsgd.commcost import NetworkModel
from dpsgd.engine import (
    AVERAGE_THEN_UPDATE,
    TRACE_COLUMNS,
    UPDATE_THEN_AVERAGE,
    MetricsTrace,
    StepSchedule,
    TrainingAborted,
    TrainState,
    cpsgd_step,
    dpsgd_step,
    eamsgd_step,
    elastic_exchange,
    initial_state,
    mix_and_update,
    output_model,
    run_training,
)
from dpsgd.problems import quadratic_problem
from dpsgd.topology import complete_weight_matrix, custom_weight_matrix, ring_weight_matrix


def test_hand_matrix_update():
    X = np.array([[1.0, 3.0]])
    G = np.array([[2.0, -1.0]])
    W = complete_weight_matrix(2)
    np.testing.assert_allclose(mix_and_update(X, W, -0.1 * G), [[1.8, 2.1]])
    np.testing.assert_allclose(mix_and_update(X, W, -0.1 * G, UPDATE_THEN_AVERAGE), [[1.95, 1.95]])


def test_cpsgd_hand_iteration():
    p = quadratic_problem(1, 1, center=1.0)
    s = initial_state(1, 1)
    s = cpsgd_step(s, 0.5, p)
    assert s.X[0, 0] == pytest.approx(0.5)
    s = cpsgd_step(s, 0.5, p)
    assert s.X[0, 0] == pytest.approx(0.75)


def test_single_node_dpsgd_is_sgd():
    p = quadratic_problem(3, 1, noise_sigma=1.0, center=2.0)
    W = ring_weight_matrix(1)
    a = b = initial_state(3, 1, seed=5)
    for _ in range(20):
        a = dpsgd_step(a, W, 0.1, p)
        b = cpsgd_step(b, 0.1, p)
    np.testing.assert_allclose(a.X, b.X, atol=1e-15)


def test_complete_graph_noise_free_equals_cpsgd():
    p = quadratic_problem(4, 5, center=1.0)
    W = complete_weight_matrix(5)
    a = b = initial_state(4, 5, x0=[3.0, -1.0, 0.0, 2.0])
    for _ in range(50):
        a = dpsgd_step(a, W, 0.2, p)
        b = cpsgd_step(b, 0.2, p)
        np.testing.assert_allclose(a.X, b.X, atol=1e-14)


def test_fixed_point_at_optimum():
    p = quadratic_problem(3, 4, center=0.7)
    s = initial_state(3, 4, x0=np.full(3, 0.7))
    s2 = dpsgd_step(s, ring_weight_matrix(4), 0.3, p)
    np.testing.assert_array_equal(s2.X, s.X)


def test_identity_matrix_gives_independent_chains():
    p = quadratic_problem(2, 3, spread=1.0, noise_sigma=0.5)
    with pytest.warns(UserWarning):
        W = custom_weight_matrix(np.eye(3))
    s = initial_state(2, 3, seed=1)
    cols = [np.zeros(2) for _ in range(3)]
    for k in range(30):
        s = dpsgd_step(s, W, 0.1, p)
        for i in range(3):
            cols[i] = cols[i] - 0.1 * p.stochastic_gradient(i, cols[i], k, 1).gradient
    np.testing.assert_allclose(s.X, np.column_stack(cols), atol=1e-14)


def test_identity_does_not_contract_consensus():
    p = quadratic_problem(5, 4, spread=2.0)
    with pytest.warns(UserWarning):
        W = custom_weight_matrix(np.eye(4))
    res = run_training(p, W=W, n_iter=200, gamma=0.1)
    assert res.trace.consensus_M[-1] > 0.9 * 4.0


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(1, 9),
    order=st.sampled_from([AVERAGE_THEN_UPDATE, UPDATE_THEN_AVERAGE]),
    seed=st.integers(0, 1000),
)
def test_column_average_invariant(n, order, seed):
    p = quadratic_problem(3, n, spread=1.0, noise_sigma=1.0)
    W = ring_weight_matrix(n)
    r = np.random.default_rng(seed)
    s = TrainState(r.normal(size=(3, n)), seed % 7, seed)
    G = p.stochastic_gradients(s.X, s.k, s.seed)
    s2 = dpsgd_step(s, W, 0.05, p, order)
    np.testing.assert_allclose(s2.X.mean(axis=1), s.X.mean(axis=1) - 0.05 * G.mean(axis=1), atol=1e-12)


def test_elastic_hand_example():
    X, c = elastic_exchange(np.array([[2.0]]), np.array([0.0]), 0.5)
    assert X[0, 0] == 1.0 and c[0] == 1.0


def test_eamsgd_zero_alpha_freezes_centre():
    p = quadratic_problem(2, 3, spread=1.0, noise_sigma=0.3)
    s = initial_state(2, 3, seed=2)
    s = TrainState(s.X, 0, 2, {"center": np.array([5.0, 5.0])})
    V = np.zeros((2, 3))
    X = s.X.copy()
    for k in range(15):
        G = p.stochastic_gradients(X, k, 2)
        V = 0.9 * V - 0.1 * G
        X = X + V
        s = eamsgd_step(s, 0.1, 0.0, 1, 0.9, p)
    np.testing.assert_allclose(s.X, X, atol=1e-14)
    np.testing.assert_array_equal(s.extras["center"], [5.0, 5.0])


def test_eamsgd_noise_free_converges():
    p = quadratic_problem(4, 4, center=1.0)
    res = run_training(p, algorithm="eamsgd", n_iter=200, gamma=0.1, momentum=0.0, tau=1)
    loss = res.trace.column("loss_avg")
    assert p.loss(res.model) < loss[0] * 1e-3
    assert np.all(np.diff(loss[20:]) <= 1e-15)


def test_eamsgd_centre_output():
    p = quadratic_problem(2, 2, center=1.0)
    res = run_training(p, algorithm="eamsgd", n_iter=50, gamma=0.1, tau=4)
    assert output_model(res.state, "center").shape == (2,)


def test_zero_iterations():
    res = run_training(quadratic_problem(3, 2), n_iter=0, gamma=0.1)
    assert len(res.trace) == 0
    np.testing.assert_array_equal(res.model, np.zeros(3))


def test_noise_free_descent_is_strict():
    p = quadratic_problem(5, 6, center=2.0)
    res = run_training(p, W=complete_weight_matrix(6), n_iter=40, gamma=0.5)
    assert np.all(np.diff(res.trace.column("loss_avg")) < 0)


def test_output_model_modes():
    s = TrainState(np.array([[0.0, 2.0]]))
    assert output_model(s)[0] == 1.0
    assert output_model(s, 1)[0] == 2.0
    s = TrainState(np.array([[3.0, 3.0]]))
    assert output_model(s)[0] == 3.0
    with pytest.raises(ValueError):
        output_model(s, 5)
    with pytest.raises(ValueError):
        output_model(s, "center")


def test_single_node_output_within_consensus_spread():
    # M is a node average of squared deviations, so at least one node is
    # within M of the average and the farthest node is at least M away
    p = quadratic_problem(10, 8, spread=1.0, noise_sigma=1.0)
    res = run_training(p, W=ring_weight_matrix(8), n_iter=500, gamma=0.05, seed=3)
    X = res.state.X
    dev = [np.sum((output_model(res.state) - output_model(res.state, i)) ** 2) for i in range(8)]
    M = np.mean(np.sum((X - X.mean(axis=1, keepdims=True)) ** 2, axis=0))
    assert min(dev) <= M <= max(dev)


def test_determinism_and_thread_pool(tmp_path):
    p = quadratic_problem(6, 8, spread=1.0, noise_sigma=1.0)
    kw = dict(W=ring_weight_matrix(8), n_iter=300, gamma=0.05, seed=11)
    a = run_training(p, **kw).trace.to_csv()
    b = run_training(p, **kw).trace.to_csv()
    c = run_training(p, n_jobs=4, **kw).trace.to_csv()
    assert a == b == c
    assert a != run_training(p, **{**kw, "seed": 12}).trace.to_csv()


def test_record_every_and_running_eps():
    p = quadratic_problem(3, 4, spread=1.0, noise_sigma=0.5)
    full = run_training(p, W=ring_weight_matrix(4), n_iter=100, gamma=0.05)
    thin = run_training(p, W=ring_weight_matrix(4), n_iter=100, gamma=0.05, record_every=10)
    assert thin.trace.k == list(range(0, 100, 10))
    np.testing.assert_array_equal(thin.trace.column("loss_avg"), full.trace.column("loss_avg")[::10])
    g = full.trace.column("grad_norm_sq_avg")
    np.testing.assert_allclose(full.trace.column("running_eps"), np.cumsum(g) / np.arange(1, 101))


def test_trace_csv_round_trip(tmp_path):
    p = quadratic_problem(3, 2, spread=1.0, noise_sigma=0.5)
    res = run_training(p, W=ring_weight_matrix(2), n_iter=20, gamma=0.1)
    res.trace.to_csv(tmp_path / "t.csv")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == ",".join(TRACE_COLUMNS)
    back = MetricsTrace.from_csv(tmp_path / "t.csv")
    for c in TRACE_COLUMNS:
        assert getattr(back, c) == getattr(res.trace, c)


def test_wallclock_column():
    p = quadratic_problem(100, 4)
    net = NetworkModel(1e6, 1e-3, 800, 0.01)
    res = run_training(p, W=ring_weight_matrix(4), n_iter=5, gamma=0.1, network=net)
    per = 0.01 + 1e-3 + 2 * 800 / 1e6
    np.testing.assert_allclose(res.trace.column("wallclock_model_s"), per * np.arange(5))
    assert res.metadata["seconds_per_iteration"] == pytest.approx(per)


def test_step_schedule():
    s = StepSchedule(0.1, drop_at=5, factor=0.5)
    assert s(4) == 0.1 and s(5) == 0.05
    with pytest.raises(ValueError):
        StepSchedule(0.0)


def test_corollary2_step_in_metadata():
    p = quadratic_problem(4, 4, noise_sigma=0.5)
    res = run_training(p, W=ring_weight_matrix(4), n_iter=100, gamma="corollary2")
    assert res.metadata["stepsize"]["gamma"] == pytest.approx(1 / (2 + 1.0 * np.sqrt(100 / 4)))


def test_divergence_aborts_with_partial_trace():
    p = quadratic_problem(2, 2, center=1.0)
    with np.errstate(all="ignore"), pytest.raises(TrainingAborted) as err:
        run_training(p, W=ring_weight_matrix(2), n_iter=5000, gamma=3.0)
    part = err.value.partial
    assert 0 < len(part.trace) < 5000
    assert part.metadata["aborted"]["k"] == err.value.k


def test_bad_arguments():
    p = quadratic_problem(2, 3)
    with pytest.raises(ValueError):
        run_training(p, algorithm="nope", n_iter=1)
    with pytest.raises(ValueError):
        run_training(p, W=ring_weight_matrix(4), n_iter=1, gamma=0.1)
    with pytest.raises(ValueError):
        dpsgd_step(initial_state(2, 3), ring_weight_matrix(3), 0.0, p)
