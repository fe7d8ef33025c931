import numpy as np
import pytest

from graph_informer.src.errors import DimensionError, NonFiniteError, ParameterError
from graph_informer.src.nn import grad_check
from graph_informer.src.tensor import (
    Tensor,
    einsum,
    layer_norm,
    matmul,
    relu,
    sigmoid,
    softmax_rows,
    softplus,
    tanh,
    tensor_abs,
    tensor_mean,
    tensor_sum,
)


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_matmul_identity():
    out = matmul(np.eye(2), np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_hand_product():
    out = Tensor([[1.0, 1.0], [1.0, 1.0]]) @ Tensor([[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[2.0], [2.0]])


def test_matmul_gradient_of_sum_is_b_transposed():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    tensor_sum(a @ b).backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    assert grad_check(lambda: tensor_sum(a @ b), [a, b]) < 1e-4


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_uniform_row():
    np.testing.assert_allclose(softmax_rows(np.zeros(3)).data, [1 / 3, 1 / 3, 1 / 3])


def test_softmax_masking_limit():
    out = softmax_rows(np.array([-1e9, 0.0])).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(1.0)


def test_softmax_rows_sum_to_one_and_ignore_row_shift():
    rng = np.random.default_rng(1)
    x = rng.normal(scale=10.0, size=(4, 5, 6))
    out = softmax_rows(x).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    shifted = softmax_rows(x + rng.normal(size=(4, 5, 1))).data
    np.testing.assert_allclose(shifted, out, atol=1e-12)


def test_layer_norm_constant_vector_maps_to_zero():
    out = layer_norm(np.full(4, 5.0), np.ones(4), np.zeros(4)).data
    np.testing.assert_allclose(out, np.zeros(4), atol=1e-12)


def test_layer_norm_hand_value():
    out = layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2)).data
    np.testing.assert_allclose(out, np.array([1.0, -1.0]) / np.sqrt(1.0 + 1e-5), rtol=1e-12)


def test_layer_norm_invariant_to_constant_shift():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 6))
    base = layer_norm(x, np.ones(6), np.zeros(6)).data
    shifted = layer_norm(x + 7.5, np.ones(6), np.zeros(6)).data
    np.testing.assert_allclose(shifted, base, atol=1e-10)


def test_layer_norm_affine_shape_checked():
    with pytest.raises(DimensionError):
        layer_norm(np.ones((2, 4)), np.ones(3), np.zeros(4))


def test_elementwise_values():
    assert sigmoid(np.array(0.0)).item() == 0.5
    assert relu(np.array(-3.0)).item() == 0.0
    assert tanh(np.array(0.0)).item() == 0.0


def test_sigmoid_of_mask_value_is_exactly_zero():
    assert sigmoid(np.array(-1e9)).item() == 0.0


def test_softplus_is_stable_for_large_inputs():
    out = softplus(np.array([-800.0, 0.0, 800.0])).data
    np.testing.assert_allclose(out, [0.0, np.log(2.0), 800.0])


@pytest.mark.parametrize(
    "build",
    [
        lambda a, b: tensor_sum(a * b + a / (b * b + 1.0) - b),
        lambda a, b: tensor_sum(sigmoid(a) * tanh(b)),
        lambda a, b: tensor_sum(relu(a) * b),
        lambda a, b: tensor_sum(softplus(a - b)),
        lambda a, b: tensor_sum(softmax_rows(a) * b),
        lambda a, b: tensor_mean(tensor_abs(a) * b),
        lambda a, b: tensor_sum(einsum("kf,lf->kl", a, b) * einsum("kf,lf->kl", a, b)),
        lambda a, b: tensor_sum(a.reshape(3, 4).transpose(1, 0) @ b.reshape(3, 4)),
        lambda a, b: tensor_sum(a.sum(axis=0, keepdims=True) * b),
    ],
)
def test_operations_pass_gradient_check(build):
    rng = np.random.default_rng(3)
    a, b = rand(rng, 4, 3), rand(rng, 4, 3)
    assert grad_check(lambda: build(a, b), [a, b]) < 1e-4


def test_sum_of_squares_gradient_check_is_tight():
    rng = np.random.default_rng(4)
    x = rand(rng, 5)
    assert grad_check(lambda: tensor_sum(x * x), [x]) < 1e-7


def test_layer_norm_sum_gradient_check():
    rng = np.random.default_rng(5)
    x, gamma, beta = rand(rng, 3, 5), rand(rng, 5), rand(rng, 5)
    assert grad_check(lambda: tensor_sum(layer_norm(x, gamma, beta) * x), [x, gamma, beta]) < 1e-4


def test_shared_subexpression_accumulates_gradient():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    tensor_sum(y + y * 3.0).backward()
    np.testing.assert_allclose(x.grad, [16.0])


def test_numpy_left_operand_defers_to_tensor():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    out = np.full((2, 2), 2.0) * x
    assert isinstance(out, Tensor)
    tensor_sum(out).backward()
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))


def test_non_finite_results_are_reported():
    with pytest.raises(NonFiniteError, match="div"):
        Tensor([1.0]) / Tensor([0.0])
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_backward_requires_scalar_or_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        (x * 2.0).backward()
    with pytest.raises(ParameterError):
        Tensor(np.ones(1)).backward()


def test_einsum_rejects_ellipsis():
    with pytest.raises(DimensionError):
        einsum("...k,...k->...", np.ones(2), np.ones(2))
