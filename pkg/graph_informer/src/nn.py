import json
from dataclasses import dataclass, field

import numpy as np

from .constants import ADAM_DEFAULTS, GRADCHECK_STEP
from .errors import CheckpointError, DimensionError, NonFiniteError, ParameterError
from .logging import set_local_logger
from .tensor import Tensor, as_tensor, relu, sigmoid, tanh

logger = set_local_logger(__name__)

ELEMENTWISE = {"sigmoid": sigmoid, "relu": relu, "tanh": tanh}
DROPOUT_MODES = ("element", "channel")


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def linear(x, weight, bias=None) -> Tensor:
    out = as_tensor(x) @ weight
    if bias is not None:
        out = out + bias
    return out


def elementwise(name: str, x) -> Tensor:
    if name not in ELEMENTWISE:
        raise ParameterError(
            f"Unknown elementwise function {name!r}, expected one of {sorted(ELEMENTWISE)}"
        )
    return ELEMENTWISE[name](x)


def dropout(
    x, rate: float, mode: str = "element", training: bool = False, rng=None
) -> Tensor:
    """
    Inverted dropout. `element` zeroes single activations; `channel` zeroes a
    whole feature channel for every node of a graph (axis -2 shares the draw).
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in DROPOUT_MODES:
        raise ParameterError(f"dropout mode must be one of {DROPOUT_MODES}, got {mode!r}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs a random generator")

    if mode == "channel" and x.ndim >= 2:
        mask_shape = x.shape[:-2] + (1, x.shape[-1])
    else:
        mask_shape = x.shape
    keep = (rng.random(mask_shape) >= rate).astype(np.float64) / (1.0 - rate)
    return x * keep


@dataclass
class AdamState:
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    learning_rate: float = ADAM_DEFAULTS["learning_rate"]
    beta1: float = ADAM_DEFAULTS["beta1"]
    beta2: float = ADAM_DEFAULTS["beta2"]
    epsilon: float = ADAM_DEFAULTS["epsilon"]


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple:
    """
    One bias-corrected Adam update over named numpy parameters.

    Returns (new_params, new_state); the inputs are left untouched.
    """
    if set(params) != set(grads):
        raise ParameterError(
            f"Adam parameter/gradient names differ: {sorted(set(params) ^ set(grads))}"
        )

    step_count = state.step_count + 1
    new_params, first_moment, second_moment = {}, {}, {}
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        grad = np.asarray(grads[name], dtype=np.float64)
        m = state.first_moment.get(name, np.zeros_like(value))
        v = state.second_moment.get(name, np.zeros_like(value))
        if not (grad.shape == value.shape == m.shape == v.shape):
            raise ParameterError(
                f"Adam shape mismatch for {name!r}: param {value.shape}, grad {grad.shape}, "
                f"moments {m.shape}/{v.shape}"
            )

        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        m_hat = m / (1.0 - state.beta1**step_count)
        v_hat = v / (1.0 - state.beta2**step_count)

        new_params[name] = value - state.learning_rate * m_hat / (
            np.sqrt(v_hat) + state.epsilon
        )
        first_moment[name] = m
        second_moment[name] = v

    new_state = AdamState(
        step_count=step_count,
        first_moment=first_moment,
        second_moment=second_moment,
        learning_rate=state.learning_rate,
        beta1=state.beta1,
        beta2=state.beta2,
        epsilon=state.epsilon,
    )
    return new_params, new_state


class Adam:
    def __init__(self, params: dict, **hyperparameters):
        self.params = params
        settings = {**ADAM_DEFAULTS, **hyperparameters}
        self.state = AdamState(**settings)

    @property
    def learning_rate(self) -> float:
        return self.state.learning_rate

    @learning_rate.setter
    def learning_rate(self, value: float) -> None:
        self.state.learning_rate = float(value)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self) -> None:
        values = {name: param.data for name, param in self.params.items()}
        grads = {
            name: param.grad if param.grad is not None else np.zeros_like(param.data)
            for name, param in self.params.items()
        }
        new_values, self.state = adam_step(values, grads, self.state)
        for name, param in self.params.items():
            param.data = new_values[name]


def grad_check(
    f,
    inputs: list,
    step: float = GRADCHECK_STEP,
    max_coordinates: int | None = None,
    rng=None,
) -> float:
    """
    Compare reverse-mode gradients of the scalar f() with central differences.

    Returns max |analytic - numeric| / max(1, |analytic|) over the checked
    coordinates. With max_coordinates set, that many coordinates per input are
    sampled instead of checking all of them.
    """
    for x in inputs:
        if not x.requires_grad:
            raise ParameterError("grad_check inputs must require grad")
        x.zero_grad()

    out = f()
    if out.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [
        x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in inputs
    ]

    sampler = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for position, x in enumerate(inputs):
        coordinates = list(np.ndindex(x.shape))
        if max_coordinates is not None and len(coordinates) > max_coordinates:
            picks = sampler.choice(len(coordinates), size=max_coordinates, replace=False)
            coordinates = [coordinates[i] for i in sorted(picks)]

        for index in coordinates:
            original = x.data[index]
            try:
                x.data[index] = original + step
                f_plus = f().item()
                x.data[index] = original - step
                f_minus = f().item()
            except NonFiniteError as e:
                raise NonFiniteError(
                    f"{e} while perturbing input {position} at {index}"
                ) from e
            finally:
                x.data[index] = original

            numeric = (f_plus - f_minus) / (2.0 * step)
            exact = analytic[position][index]
            if not np.isfinite(exact):
                raise NonFiniteError(
                    f"Non-finite analytic gradient for input {position} at {index}"
                )
            error = abs(exact - numeric) / max(1.0, abs(exact))
            worst = max(worst, error)

    logger.debug(f"grad_check over {len(inputs)} inputs: max relative error {worst:.3e}")
    return worst


def save_parameters(path, params: dict, header: dict | None = None) -> None:
    """
    Checkpoint layout:
        {
            <header keys>,
            "parameters": {
                "<name>": {"shape": [<int>, ...], "data": [<float>, ...]},
                ...
            }
        }
    Floats are written with Python's shortest round-trip repr, so reloading
    restores every value bit for bit.
    """
    document = dict(header or {})
    document["parameters"] = {}
    for name, value in params.items():
        array = value.data if isinstance(value, Tensor) else np.asarray(value)
        document["parameters"][name] = {
            "shape": list(array.shape),
            "data": [float(v) for v in array.reshape(-1)],
        }

    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(document, fh, sort_keys=True)
    except OSError as e:
        logger.warning(f"Error writing checkpoint {path}: {e}")
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}") from e


def load_parameters(path) -> tuple:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            document = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        logger.warning(f"Error reading checkpoint {path}: {e}")
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    if "parameters" not in document:
        raise CheckpointError(f"Checkpoint {path} has no 'parameters' map")

    params = {}
    for name, entry in document.pop("parameters").items():
        shape = tuple(entry["shape"])
        data = entry["data"]
        if int(np.prod(shape)) != len(data):
            raise CheckpointError(
                f"Parameter {name!r} declares shape {shape} but stores {len(data)} values"
            )
        params[name] = np.array(data, dtype=np.float64).reshape(shape)

    return document, params
