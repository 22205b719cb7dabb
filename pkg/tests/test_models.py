import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedorch.models import (
    Dataset,
    Hyperparams,
    Metrics,
    ModelSpec,
    ParameterVector,
    evaluate,
    forward,
    grad_mse,
    init_model,
    metrics_from_predictions,
    mse_loss,
    sgd_step,
)

LINEAR3 = ModelSpec(kind="linear", input_dim=3)


def finite_difference_grad(spec, params, batch, step=1e-6):
    """Independent oracle: central finite differences of the batch MSE."""
    grad = np.zeros(params.size)
    for i in range(params.size):
        lo = params.values.copy()
        hi = params.values.copy()
        lo[i] -= step
        hi[i] += step
        f_hi = mse_loss(spec, ParameterVector(hi, params.layout), batch)
        f_lo = mse_loss(spec, ParameterVector(lo, params.layout), batch)
        grad[i] = (f_hi - f_lo) / (2.0 * step)
    return grad


def grad_check_error(analytic, numeric):
    """Max absolute error normalized by the gradient scale (floor 1)."""
    scale = max(1.0, np.abs(analytic).max(), np.abs(numeric).max())
    return float(np.abs(analytic - numeric).max() / scale)


def random_batch(rng, dim, rows):
    return Dataset(rng.standard_normal((rows, dim)), rng.standard_normal(rows))


# ---------------------------------------------------------------- init_model


def test_init_is_deterministic():
    a = init_model(LINEAR3, seed=7)
    b = init_model(LINEAR3, seed=7)
    assert np.array_equal(a.values, b.values)
    assert a.layout == b.layout


def test_init_biases_are_zero():
    for seed in (0, 7, 1990):
        params = init_model(LINEAR3, seed=seed)
        assert params.segments()["bias"][0] == 0.0
    mlp = ModelSpec(kind="mlp", input_dim=4, hidden_dims=(8,))
    segs = init_model(mlp, seed=3).segments()
    assert np.all(segs["layer0.bias"] == 0.0)
    assert np.all(segs["layer1.bias"] == 0.0)


def test_mlp_param_count():
    # 4*8 + 8 + 8*1 + 1 = 49, counted by hand from the layout arithmetic
    spec = ModelSpec(kind="mlp", input_dim=4, hidden_dims=(8,))
    params = init_model(spec, seed=1990)
    assert spec.param_count() == 49
    assert params.size == 49


def test_init_weight_range():
    spec = ModelSpec(kind="mlp", input_dim=16, hidden_dims=(8,))
    segs = init_model(spec, seed=11).segments()
    assert np.abs(segs["layer0.weights"]).max() <= 1.0 / math.sqrt(16)
    assert np.abs(segs["layer1.weights"]).max() <= 1.0 / math.sqrt(8)


def test_layout_size_mismatch_rejected():
    with pytest.raises(ValueError):
        ParameterVector(np.zeros(3), (("weights", (2,)), ("bias", (2,))))


# ------------------------------------------------------------------- forward


def test_forward_zero_params_is_zero():
    params = ParameterVector(np.zeros(4), LINEAR3.layout())
    X = np.arange(12.0).reshape(4, 3)
    assert np.all(forward(LINEAR3, params, X) == 0.0)


def test_forward_linear_hand_case():
    # w=[1,2], b=3, x=[4,5] -> 1*4 + 2*5 + 3 = 17
    spec = ModelSpec(kind="linear", input_dim=2)
    params = ParameterVector(np.array([1.0, 2.0, 3.0]), spec.layout())
    preds = forward(spec, params, np.array([[4.0, 5.0]]))
    assert preds[0] == 17.0


def test_forward_mlp_zero_hidden_weights_gives_output_bias():
    spec = ModelSpec(kind="mlp", input_dim=3, hidden_dims=(5,))
    params = init_model(spec, seed=2).copy()
    segs = params.segments()
    segs["layer0.weights"][:] = 0.0
    segs["layer1.bias"][:] = 4.25
    preds = forward(spec, params, np.random.default_rng(0).standard_normal((6, 3)))
    assert np.all(preds == 4.25)


def test_forward_dimension_mismatch_rejected():
    params = init_model(LINEAR3, seed=1)
    with pytest.raises(ValueError):
        forward(LINEAR3, params, np.zeros((2, 4)))
    wrong = ParameterVector(np.zeros(5), (("weights", (4,)), ("bias", (1,))))
    with pytest.raises(ValueError):
        forward(LINEAR3, wrong, np.zeros((2, 3)))


def test_forward_deterministic():
    rng = np.random.default_rng(5)
    spec = ModelSpec(kind="mlp", input_dim=4, hidden_dims=(6, 3))
    params = init_model(spec, seed=9)
    X = rng.standard_normal((10, 4))
    assert np.array_equal(forward(spec, params, X), forward(spec, params, X))


# ------------------------------------------------------------------ grad_mse


def test_grad_zero_at_perfect_fit():
    spec = ModelSpec(kind="linear", input_dim=2)
    params = ParameterVector(np.array([1.0, -2.0, 0.5]), spec.layout())
    X = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 3.0]])
    y = forward(spec, params, X)
    grad = grad_mse(spec, params, Dataset(X, y))
    assert np.all(grad.values == 0.0)


def test_grad_linear_hand_case():
    # d=1, w=0, b=0, one row (x=1, y=2): d/dw (0-2)^2 = 2*(-2)*1 = -4
    spec = ModelSpec(kind="linear", input_dim=1)
    params = ParameterVector(np.zeros(2), spec.layout())
    grad = grad_mse(spec, params, Dataset(np.array([[1.0]]), np.array([2.0])))
    assert grad.values[0] == -4.0
    assert grad.values[1] == -4.0


def test_grad_empty_batch_rejected():
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 3)), np.zeros(0))


@pytest.mark.parametrize(
    "spec",
    [
        ModelSpec(kind="linear", input_dim=4),
        ModelSpec(kind="mlp", input_dim=3, hidden_dims=(5,)),
        ModelSpec(kind="mlp", input_dim=4, hidden_dims=(6, 4)),
    ],
)
def test_grad_matches_finite_differences(spec):
    rng = np.random.default_rng(hash(spec.kind) % 2**32 + len(spec.hidden_dims))
    for trial in range(10):
        params = ParameterVector(rng.standard_normal(spec.param_count()), spec.layout())
        batch = random_batch(rng, spec.input_dim, rows=rng.integers(1, 8))
        analytic = grad_mse(spec, params, batch).values
        numeric = finite_difference_grad(spec, params, batch)
        assert grad_check_error(analytic, numeric) < 1e-5


# ------------------------------------------------------------------ sgd_step


def test_sgd_zero_lr_is_identity():
    params = init_model(LINEAR3, seed=4)
    grad = ParameterVector(np.full(4, 3.7), LINEAR3.layout())
    stepped = sgd_step(params, grad, lr=0.0)
    assert np.array_equal(stepped.values, params.values)


def test_sgd_hand_case():
    layout = (("weights", (2,)),)
    params = ParameterVector(np.array([1.0, 1.0]), layout)
    grad = ParameterVector(np.array([2.0, -2.0]), layout)
    out = sgd_step(params, grad, lr=0.5)
    assert np.array_equal(out.values, np.array([0.0, 2.0]))


def test_sgd_linearity_on_frozen_gradient():
    rng = np.random.default_rng(12)
    params = init_model(LINEAR3, seed=12)
    grad = ParameterVector(rng.standard_normal(4), LINEAR3.layout())
    twice = sgd_step(sgd_step(params, grad, 0.1), grad, 0.1)
    once = sgd_step(params, ParameterVector(2.0 * grad.values, grad.layout), 0.1)
    np.testing.assert_allclose(twice.values, once.values, rtol=1e-12)


def test_sgd_layout_mismatch_rejected():
    params = init_model(LINEAR3, seed=4)
    grad = ParameterVector(np.zeros(4), (("other", (4,)),))
    with pytest.raises(ValueError):
        sgd_step(params, grad, 0.1)


# ------------------------------------------------------------------ evaluate


def test_evaluate_perfect_predictions():
    m = metrics_from_predictions(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0]))
    assert m.mse == 0.0 and m.rmse == 0.0 and m.mae == 0.0
    assert m.corr == 1.0


def test_evaluate_constant_target_hand_case():
    m = metrics_from_predictions(np.array([1.0, 3.0]), np.array([2.0, 2.0]))
    assert m.mse == 1.0
    assert m.rmse == 1.0
    assert m.mae == 1.0
    assert m.corr == 0.0  # zero-variance side rule


def test_evaluate_shifted_predictions():
    targets = np.array([1.0, 2.0, 5.0])
    m = metrics_from_predictions(targets + 1.0, targets)
    assert m.mae == 1.0
    assert m.corr == pytest.approx(1.0, abs=1e-12)


def test_evaluate_through_model():
    spec = ModelSpec(kind="linear", input_dim=1)
    params = ParameterVector(np.array([2.0, 0.0]), spec.layout())
    test = Dataset(np.array([[1.0], [2.0]]), np.array([2.0, 4.0]))
    m = evaluate(spec, params, test)
    assert m.mse == 0.0 and m.corr == 1.0


@given(
    st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40),
    st.integers(0, 2**32 - 1),
)
@settings(max_examples=100, deadline=None)
def test_metric_invariants(targets, seed):
    targets = np.asarray(targets)
    preds = targets + np.random.default_rng(seed).standard_normal(targets.size)
    m = metrics_from_predictions(preds, targets)
    assert m.rmse * m.rmse == pytest.approx(m.mse, rel=1e-12)
    assert m.mae <= m.rmse * (1.0 + 1e-12)
    assert -1.0 - 1e-12 <= m.corr <= 1.0 + 1e-12


# ---------------------------------------------------------------- properties


def test_one_epoch_decreases_mse_on_noiseless_linear():
    rng = np.random.default_rng(77)
    spec = ModelSpec(kind="linear", input_dim=1)
    X = rng.standard_normal((64, 1))
    y = 3.0 * X[:, 0] + 1.5
    data = Dataset(X, y)
    params = init_model(spec, seed=77)
    before = mse_loss(spec, params, data)
    for i in range(data.num_rows):
        batch = Dataset(X[i : i + 1], y[i : i + 1])
        params = sgd_step(params, grad_mse(spec, params, batch), lr=0.05)
    after = mse_loss(spec, params, data)
    assert after < before


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        Hyperparams(learning_rate=-1.0, batch_size=1, seed=0)
    with pytest.raises(ValueError):
        Hyperparams(learning_rate=0.1, batch_size=0, seed=0)
    with pytest.raises(ValueError):
        Hyperparams(learning_rate=0.1, batch_size=1, seed=-3)


def test_dataset_rejects_nan():
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), np.array([1.0]))
    with pytest.raises(ValueError):
        Dataset(np.array([[1.0]]), np.array([np.inf]))
