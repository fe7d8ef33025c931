import json

import numpy as np
import pytest

from graph_informer.src.errors import CheckpointError, DimensionError, ParameterError
from graph_informer.src.nn import (
    Adam,
    AdamState,
    adam_step,
    dropout,
    elementwise,
    grad_check,
    init_uniform,
    linear,
    load_parameters,
    save_parameters,
)
from graph_informer.src.tensor import Tensor, tensor_sum


def test_dropout_identity_cases():
    x = np.arange(6.0).reshape(2, 3)
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(dropout(x, 0.0, training=True, rng=rng).data, x)
    np.testing.assert_array_equal(dropout(x, 0.5, training=False).data, x)


def test_dropout_is_unbiased():
    rng = np.random.default_rng(1)
    x = np.ones(5)
    draws = np.stack([dropout(x, 0.5, training=True, rng=rng).data for _ in range(10_000)])
    standard_error = 1.0 / np.sqrt(draws.size)
    assert abs(draws.mean() - 1.0) < 3 * standard_error


def test_channel_dropout_shares_mask_across_nodes():
    rng = np.random.default_rng(2)
    out = dropout(np.ones((2, 4, 8)), 0.5, mode="channel", training=True, rng=rng).data
    assert np.all(out == out[:, :1, :])
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_rejects_bad_settings():
    with pytest.raises(ParameterError):
        dropout(np.ones(3), 1.0, training=True, rng=np.random.default_rng(0))
    with pytest.raises(ParameterError):
        dropout(np.ones(3), 0.1, mode="node")
    with pytest.raises(ParameterError):
        dropout(np.ones(3), 0.1, training=True)


def test_init_uniform_bounds():
    w = init_uniform(np.random.default_rng(3), 16, (16, 4))
    assert w.requires_grad
    assert np.all(np.abs(w.data) <= 0.25)


def test_linear_and_elementwise():
    out = linear(np.ones((2, 3)), Tensor(np.ones((3, 2))), Tensor(np.array([1.0, -10.0])))
    np.testing.assert_array_equal(out.data, [[4.0, -7.0], [4.0, -7.0]])
    np.testing.assert_array_equal(elementwise("relu", out).data, [[4.0, 0.0], [4.0, 0.0]])
    with pytest.raises(ParameterError):
        elementwise("gelu", out)


def test_adam_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, 1.0, 1.0])}
    grads = {"w": np.array([0.5, -2.0, 0.0])}
    new_params, state = adam_step(params, grads, AdamState(learning_rate=0.01))
    np.testing.assert_allclose(new_params["w"], [0.99, 1.01, 1.0], atol=1e-7)
    assert state.step_count == 1
    np.testing.assert_array_equal(params["w"], [1.0, 1.0, 1.0])


def test_adam_zero_gradient_leaves_parameters():
    params = {"w": np.array([[2.0, -1.0]])}
    new_params, _ = adam_step(params, {"w": np.zeros((1, 2))}, AdamState())
    np.testing.assert_array_equal(new_params["w"], params["w"])


def test_adam_is_deterministic():
    params = {"w": np.array([0.3, -0.7])}
    grads = {"w": np.array([1.5, 0.2])}
    state = AdamState(learning_rate=0.05)
    first, first_state = adam_step(params, grads, state)
    second, second_state = adam_step(params, grads, state)
    np.testing.assert_array_equal(first["w"], second["w"])
    np.testing.assert_array_equal(first_state.second_moment["w"], second_state.second_moment["w"])


def test_adam_rejects_mismatched_gradients():
    with pytest.raises(ParameterError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())
    with pytest.raises(ParameterError):
        adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, AdamState())


def test_adam_minimizes_scalar_quadratic():
    w = Tensor(np.array([0.0]), requires_grad=True)
    optimizer = Adam({"w": w}, learning_rate=0.1)
    for _ in range(200):
        optimizer.zero_grad()
        tensor_sum((w - 3.0) * (w - 3.0)).backward()
        optimizer.step()
    assert abs(w.data[0] - 3.0) < 0.01
    assert optimizer.state.step_count == 200


def test_grad_check_flags_wrong_gradients():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def inflated_backward():
        out = tensor_sum(x * x)
        original = out._backward

        def wrong(g):
            return tuple(3.0 * grad for grad in original(g))

        out._backward = wrong
        return out

    assert grad_check(inflated_backward, [x]) > 0.5


def test_grad_check_needs_scalar():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(DimensionError):
        grad_check(lambda: x * 2.0, [x])


def test_grad_check_samples_coordinates():
    x = Tensor(np.random.default_rng(4).normal(size=(10, 10)), requires_grad=True)
    error = grad_check(lambda: tensor_sum(x * x * x), [x], max_coordinates=5)
    assert error < 1e-4


def test_parameters_reload_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    params = {"a": rng.normal(size=(3, 2)), "b": Tensor(rng.normal(size=4)), "c": np.array(1 / 3)}
    path = tmp_path / "params.json"
    save_parameters(path, params, {"version": 1})
    header, loaded = load_parameters(path)
    assert header == {"version": 1}
    np.testing.assert_array_equal(loaded["a"], params["a"])
    np.testing.assert_array_equal(loaded["b"], params["b"].data)
    assert loaded["c"].shape == ()
    assert loaded["c"] == 1 / 3


def test_load_parameters_rejects_inconsistent_shape(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"parameters": {"w": {"shape": [2, 2], "data": [1.0]}}}))
    with pytest.raises(CheckpointError, match="shape"):
        load_parameters(path)


def test_load_parameters_reports_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_parameters(tmp_path / "missing.json")
