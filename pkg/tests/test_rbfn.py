import numpy as np
import pytest

from qmetasur.dataset import build_offline
from qmetasur.errors import ArityError, ConfigError, DegenerateError
from qmetasur.rbfn import RbfnModel, RbfnOracle, fit_rbfn_oracle, rbfn_fit, rbfn_predict
from qmetasur.tasks import make_suite


def _grid_1d(n):
    return np.linspace(0.0, 1.0, n)[:, None]


def test_constant_target_fits_exactly():
    rng = np.random.default_rng(0)
    x = rng.random((30, 2))
    y = np.full(30, 7.25)
    model = rbfn_fit(x, y, seed=1)
    pred = rbfn_predict(model, x)
    assert float(((pred - y) ** 2).mean()) <= 1e-12


def test_full_center_interpolation():
    x = _grid_1d(20)
    y = np.sin(3.0 * x[:, 0])
    model = rbfn_fit(x, y, c_grid=(20,), seed=3)
    assert len(model.centers) == 20
    rmse = float(np.sqrt(((rbfn_predict(model, x) - y) ** 2).mean()))
    assert rmse <= 1e-6


def test_linear_function_generalizes():
    x = _grid_1d(20)
    y = 2.0 * x[:, 0]
    model = rbfn_fit(x, y, seed=5)
    grid = _grid_1d(200)
    rmse = float(np.sqrt(((rbfn_predict(model, grid) - 2.0 * grid[:, 0]) ** 2).mean()))
    assert rmse <= 0.05


def test_predict_at_training_point_interpolating():
    rng = np.random.default_rng(2)
    x = rng.random((15, 2))
    y = rng.normal(size=15)
    model = rbfn_fit(x, y, c_grid=(15,), seed=2)
    for i in (0, 7, 14):
        assert abs(rbfn_predict(model, x[i]) - y[i]) < 1e-4


def test_far_field_returns_bias():
    rng = np.random.default_rng(4)
    x = rng.random((25, 2))
    y = rng.normal(size=25)
    model = rbfn_fit(x, y, seed=4)
    bias = model.weights[-1]
    assert rbfn_predict(model, np.array([1e6, -1e6])) == pytest.approx(bias, abs=1e-12)


def test_batch_prediction_order_preserving():
    rng = np.random.default_rng(6)
    x = rng.random((30, 3))
    y = x.sum(axis=1)
    model = rbfn_fit(x, y, seed=6)
    queries = rng.random((9, 3))
    batch = rbfn_predict(model, queries)
    singles = np.array([rbfn_predict(model, q) for q in queries])
    # matmul kernels differ between the two shapes, so allow last-ulp slack
    np.testing.assert_allclose(batch, singles, rtol=1e-13)
    perm = np.array([4, 0, 8, 2, 6, 1, 7, 3, 5])
    np.testing.assert_allclose(rbfn_predict(model, queries[perm]), batch[perm], rtol=1e-13)


def test_fit_deterministic_under_seed():
    rng = np.random.default_rng(8)
    x = rng.random((40, 2))
    y = np.cos(x[:, 0]) + x[:, 1] ** 2
    a = rbfn_fit(x, y, seed=11)
    b = rbfn_fit(x, y, seed=11)
    assert np.array_equal(a.centers, b.centers)
    assert np.array_equal(a.widths, b.widths)
    assert np.array_equal(a.weights, b.weights)
    c = rbfn_fit(x, y, seed=12)
    assert not np.array_equal(a.centers, c.centers)


def test_grid_capped_at_data_size():
    rng = np.random.default_rng(9)
    x = rng.random((8, 2))
    y = rng.normal(size=8)
    model = rbfn_fit(x, y, c_grid=(5, 10, 20, 40), seed=9)
    assert 1 <= len(model.centers) <= 8


def test_degenerate_and_arity_errors():
    x = np.ones((10, 2))
    with pytest.raises(DegenerateError):
        rbfn_fit(x, np.arange(10.0))
    with pytest.raises(DegenerateError):
        rbfn_fit(np.array([[0.0, 0.0]]), np.array([1.0]))
    with pytest.raises(ConfigError):
        rbfn_fit(np.random.default_rng(0).random((5, 2)), np.zeros(5), c_grid=(0,))
    ok = rbfn_fit(np.random.default_rng(0).random((10, 2)), np.zeros(10), seed=1)
    with pytest.raises(ArityError):
        rbfn_predict(ok, np.zeros(3))
    with pytest.raises(ArityError):
        rbfn_fit(np.random.default_rng(0).random((5, 2)), np.zeros(4))


def test_width_invariants_enforced():
    with pytest.raises(DegenerateError):
        RbfnModel(np.zeros((1, 2)), np.array([0.0]), np.zeros(2))
    with pytest.raises(ArityError):
        RbfnModel(np.zeros((2, 2)), np.array([1.0, 1.0]), np.zeros(2))


def test_prediction_continuous_in_x():
    rng = np.random.default_rng(13)
    x = rng.random((25, 2))
    y = rng.normal(size=25)
    model = rbfn_fit(x, y, seed=13)
    base = rng.random(2)
    f0 = rbfn_predict(model, base)
    for eps in (1e-6, 1e-8):
        assert abs(rbfn_predict(model, base + eps) - f0) < 1e-3


def _fake_task():
    import dataclasses

    base = make_suite("Sphere", 1, 3, seed=0).task(1)
    return dataclasses.replace(base, task_id=99)


def test_oracle_matches_per_model_predictions():
    suite = make_suite("Sphere", n_tasks=2, n_dim=3, seed=21)
    ds = build_offline(suite, n_per_task=40, seed=21)
    oracle = fit_rbfn_oracle(ds, suite, seed=21)
    task = suite.task(1)
    queries = np.random.default_rng(1).uniform(size=(6, 3))
    out = oracle.evaluate(task, queries)
    assert out.shape == (6, 2)
    for j in range(2):
        direct = rbfn_predict(oracle.models[1][j], queries)
        assert np.array_equal(out[:, j], direct)
    with pytest.raises(ConfigError):
        oracle.evaluate(_fake_task(), queries)


def test_oracle_tracks_true_objectives_roughly():
    suite = make_suite("Sphere", n_tasks=1, n_dim=3, seed=33)
    ds = build_offline(suite, n_per_task=120, seed=33)
    oracle = fit_rbfn_oracle(ds, suite, seed=33)
    task = suite.task(1)
    from qmetasur.tasks import evaluate_batch

    queries = np.random.default_rng(3).uniform(0.05, 0.95, size=(50, 3))
    approx = oracle.evaluate(task, queries)
    exact = evaluate_batch(task, queries)
    spread = exact.max(axis=0) - exact.min(axis=0)
    mae = np.abs(approx - exact).mean(axis=0) / spread
    assert np.all(mae < 0.2)
