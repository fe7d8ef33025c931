"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation returns a new Tensor that remembers its parent
tensors and a backward function mapping the output gradient to one gradient per
parent. `Tensor.backward()` orders the recorded graph topologically (the tape)
and replays it in reverse, accumulating gradients into the `grad` buffers of
leaf tensors created with `requires_grad=True`.

Forward results are checked for NaN/Inf; a non-finite value raises
NonFiniteError naming the operation and the first offending index.
"""

import numpy as np

from .constants import LAYER_NORM_EPS
from .errors import DimensionError, NonFiniteError, ParameterError


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        bad = np.argwhere(~np.isfinite(data))
        location = tuple(int(i) for i in bad[0]) if bad.size else ()
        raise NonFiniteError(f"Non-finite value produced by {op} at index {location}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: "Tensor", b: "Tensor", op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} cannot be broadcast together"
        ) from None


class Tensor:
    # Make numpy defer to our reflected operators (ndarray + Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        _check_finite(self.data, "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _tape(self) -> list:
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise ParameterError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError(
                f"seed gradient shape {grad.shape} does not match tensor shape {self.shape}"
            )

        pending = {id(self): grad}
        for node in reversed(self._tape()):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward is None:
                node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad

    # Operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def abs(self):
        return tensor_abs(self)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data, parents, backward, op) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    _check_finite(data, op)
    return Tensor._from_op(data, parents, backward, op)


# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (-g,)

    return _result(-a.data, (a,), backward, "neg")


# Products


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.shape} x {b.shape}"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul batch dimensions differ: {a.shape} x {b.shape}"
        ) from None

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def _parse_einsum(subscripts: str) -> tuple:
    if "->" not in subscripts or "." in subscripts:
        raise DimensionError(f"einsum needs explicit output and no ellipsis: {subscripts!r}")
    inputs, output = subscripts.replace(" ", "").split("->")
    operands = inputs.split(",")
    if len(operands) != 2:
        raise DimensionError(f"einsum supports exactly two operands: {subscripts!r}")
    first, second = operands
    for term in (first, second, output):
        if len(set(term)) != len(term):
            raise DimensionError(f"einsum repeated index within a term: {subscripts!r}")
    for term, other in ((first, second), (second, first)):
        for index in term:
            if index not in other and index not in output:
                raise DimensionError(
                    f"einsum index {index!r} is summed inside a single operand: {subscripts!r}"
                )
    return first, second, output


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum, e.g. einsum("kf,klf->kl", q_route, k_route)."""
    a, b = as_tensor(a), as_tensor(b)
    first, second, output = _parse_einsum(subscripts)
    try:
        out = np.einsum(f"{first},{second}->{output}", a.data, b.data)
    except ValueError as e:
        raise DimensionError(
            f"einsum {subscripts!r} on shapes {a.shape} and {b.shape}: {e}"
        ) from None

    def backward(g):
        grad_a = np.einsum(f"{output},{second}->{first}", g, b.data)
        grad_b = np.einsum(f"{output},{first}->{second}", g, a.data)
        return grad_a, grad_b

    return _result(out, (a, b), backward, "einsum")


# Shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), backward, "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid transpose axes {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), backward, "transpose")


def _normalize_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            for ax in axes:
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tensor_sum(a, axis=axes, keepdims=keepdims) / float(max(count, 1))


# Nonlinearities


def tensor_abs(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * np.sign(a.data),)

    return _result(np.abs(a.data), (a,), backward, "abs")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _stable_sigmoid(a.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _result(y, (a,), backward, "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * (a.data > 0),)

    return _result(np.maximum(a.data, 0.0), (a,), backward, "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _result(y, (a,), backward, "tanh")


def softplus(a) -> Tensor:
    """log(1 + exp(x)) without overflow for large |x|."""
    a = as_tensor(a)

    def backward(g):
        return (g * _stable_sigmoid(a.data),)

    return _result(np.logaddexp(0.0, a.data), (a,), backward, "softplus")


def softmax_rows(a) -> Tensor:
    """Softmax over the trailing axis, stabilized by max-subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    exp_shifted = np.exp(shifted)
    y = exp_shifted / exp_shifted.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (a,), backward, "softmax")


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"layer_norm needs a non-empty trailing axis, got {x.shape}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes gamma={gamma.shape} beta={beta.shape} "
            f"do not match feature size {d}"
        )

    mu = x.data.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    x_hat = (x.data - mu) / sigma
    out = gamma.data * x_hat + beta.data

    def backward(g):
        grad_gamma = _unbroadcast(g * x_hat, gamma.shape)
        grad_beta = _unbroadcast(g, beta.shape)
        dx_hat = g * gamma.data
        mean_correction = dx_hat.sum(axis=-1, keepdims=True)
        std_correction = (dx_hat * x_hat).sum(axis=-1, keepdims=True) * x_hat
        grad_x = (d * dx_hat - mean_correction - std_correction) / (d * sigma)
        return grad_x, grad_gamma, grad_beta

    return _result(out, (x, gamma, beta), backward, "layer_norm")
