"""Differentiable layers with hand-written backward passes.

Each operation is available twice: as a pure function pair
(``*_forward`` / ``*_backward``) and wrapped in a :class:`Layer` subclass
that owns parameters, gradients, non-trainable state and the forward cache.
"""

from __future__ import annotations

from typing import Any

import numpy as np

from .tensor import (
    DTYPE,
    ShapeError,
    check_finite,
    conv2d_backward,
    conv2d_forward,
    flatten,
    matmul,
    maxpool2d_backward,
    maxpool2d_forward,
)

Shape = tuple[int, ...]


# ---------------------------------------------------------------------------
# Functional forms
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if bias.shape != (weights.shape[-1],):
        raise ShapeError(f"dense bias shape {bias.shape} does not match weights shape {weights.shape}")
    out = matmul(x, weights)
    out += bias
    return out


def dense_backward(
    x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_x = matmul(grad_out, weights.T)
    grad_w = matmul(x.T, grad_out)
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def _bn_view(x: np.ndarray) -> np.ndarray:
    """(N, C, rest) view whose per-channel reductions run over axes 0 and 2."""
    if x.ndim == 4:
        return x.reshape(x.shape[0], x.shape[1], -1)
    if x.ndim == 2:
        return x.reshape(x.shape[0], x.shape[1], 1)
    raise ShapeError(f"batch norm expects a 2-D or 4-D input, got shape {x.shape}")


def _channel_sum(v3: np.ndarray) -> np.ndarray:
    return v3.sum(axis=2).sum(axis=0, dtype=np.float64)


def _channel_dot(a3: np.ndarray, b3: np.ndarray) -> np.ndarray:
    return np.einsum("nci,nci->nc", a3, b3).sum(axis=0, dtype=np.float64)


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.9,
    epsilon: float = 1e-3,
) -> tuple[np.ndarray, tuple | None]:
    """Per-channel batch normalization.

    Spatial (N, C, H, W) inputs are normalized per channel over (N, H, W);
    (N, D) inputs per feature over N. In training mode the batch statistics
    are used and the running statistics are updated in place as
    ``r = momentum * r + (1 - momentum) * batch``. Inference mode only reads
    the running statistics. Variance is the biased (population) variance.

    Returns the output and the cache needed by :func:`batchnorm_backward`
    (None in inference mode).
    """
    x3 = _bn_view(x)
    n, channels, rest = x3.shape
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batch norm parameters {gamma.shape}/{beta.shape} do not match input shape {x.shape}")
    dtype = np.result_type(DTYPE, x)
    if training:
        count = n * rest
        if count < 2:
            raise ShapeError(
                f"training-mode batch norm needs at least 2 values per channel, got input shape {x.shape}"
            )
        mean = _channel_sum(x3) / count
        x_hat = x3 - mean.astype(dtype)[None, :, None]
        var = _channel_dot(x_hat, x_hat) / count
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.astype(running_var.dtype)
    else:
        var = running_var.astype(np.float64)
        x_hat = x3 - running_mean.astype(dtype)[None, :, None]
    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(dtype)
    x_hat *= inv_std[None, :, None]
    out = x_hat * gamma.astype(dtype)[None, :, None]
    out += beta.astype(dtype)[None, :, None]
    check_finite(out, "batchnorm_forward")
    cache = (x_hat.reshape(x.shape), inv_std, gamma) if training else None
    return out.reshape(x.shape), cache


def batchnorm_backward(cache: tuple, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of training-mode batch norm, batch statistics included."""
    x_hat, inv_std, gamma = cache
    if grad_out.shape != x_hat.shape:
        raise ShapeError(f"batch norm grad_out shape {grad_out.shape} does not match {x_hat.shape}")
    g3, xh3 = _bn_view(grad_out), _bn_view(x_hat)
    count = g3.shape[0] * g3.shape[2]
    dtype = x_hat.dtype
    grad_beta = _channel_sum(g3)
    grad_gamma = _channel_dot(g3, xh3)
    # dx = gamma * inv_std / M * (M * g - sum(g) - x_hat * sum(g * x_hat))
    scale = gamma.astype(np.float64) * inv_std.astype(np.float64) / count
    grad_x = xh3 * (-scale * grad_gamma).astype(dtype)[None, :, None]
    grad_x -= (scale * grad_beta).astype(dtype)[None, :, None]
    grad_x += g3 * (scale * count).astype(dtype)[None, :, None]
    return grad_x.reshape(grad_out.shape), grad_gamma.astype(dtype), grad_beta.astype(dtype)


def leaky_relu_forward(x: np.ndarray, alpha: float) -> np.ndarray:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    scaled = x * x.dtype.type(alpha)
    if alpha <= 1.0:
        return np.maximum(x, scaled, out=scaled)
    return np.where(x > 0, x, scaled)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, alpha: float) -> np.ndarray:
    grad = grad_out * grad_out.dtype.type(alpha)
    np.copyto(grad, grad_out, where=x > 0)
    return grad


def dropout_forward(
    x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time.

    The returned mask already carries the scaling, so the backward pass is a
    plain multiply. Inference mode (or ``rate == 0``) is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, np.ones_like(x) if training else None
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(mask: np.ndarray | None, grad_out: np.ndarray) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so neither branch can overflow.
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)


def sigmoid_backward(output: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * output * (1.0 - output)


# ---------------------------------------------------------------------------
# Layer objects
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape: Shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.float32(np.sqrt(6.0 / (fan_in + fan_out)))
    w = rng.random(shape, dtype=np.float32)
    w *= 2 * limit
    w -= limit
    return w


class Layer:
    """Base class for all layers.

    Subclasses declare ``param_shapes`` and ``state_shapes`` and implement
    ``forward``/``backward``. Parameter tensors are created lazily by
    :meth:`materialize` so a large model can be described and counted
    without allocating its weights.
    """

    kind = "Layer"

    def __init__(self) -> None:
        self.name = self.kind.lower()
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}
        self._cache: Any = None

    # descriptors ---------------------------------------------------------
    def config(self) -> dict:
        return {"kind": self.kind}

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def param_shapes(self) -> dict[str, Shape]:
        return {}

    def state_shapes(self) -> dict[str, Shape]:
        return {}

    def count_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    # storage ---------------------------------------------------------------
    @property
    def materialized(self) -> bool:
        return len(self.params) == len(self.param_shapes()) and len(self.state) == len(self.state_shapes())

    def materialize(self, rng: np.random.Generator) -> None:
        pass

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def clear_cache(self) -> None:
        self._cache = None

    # computation -----------------------------------------------------------
    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray | None:
        raise NotImplementedError

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.config().items() if k != "kind")
        return f"{self.kind}({args})"


class Conv2D(Layer):
    kind = "Conv2D"

    def __init__(self, in_channels: int, filters: int) -> None:
        super().__init__()
        self.in_channels = int(in_channels)
        self.filters = int(filters)
        self.need_input_grad = True

    def config(self) -> dict:
        return {"kind": self.kind, "in_channels": self.in_channels, "filters": self.filters}

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(f"{self!r} cannot take input shape {input_shape}")
        return (self.filters,) + tuple(input_shape[1:])

    def param_shapes(self) -> dict[str, Shape]:
        return {"kernel": (self.filters, self.in_channels, 3, 3), "bias": (self.filters,)}

    def materialize(self, rng: np.random.Generator) -> None:
        shapes = self.param_shapes()
        self.params["kernel"] = glorot_uniform(
            rng, shapes["kernel"], self.in_channels * 9, self.filters * 9
        )
        self.params["bias"] = np.zeros(shapes["bias"], dtype=DTYPE)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        out = conv2d_forward(x, self.params["kernel"], self.params["bias"])
        self._cache = x if training else None
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray | None:
        gx, gw, gb = conv2d_backward(
            self._cache, self.params["kernel"], grad_out, need_input_grad=self.need_input_grad
        )
        self.grads["kernel"] = gw
        self.grads["bias"] = gb
        self._cache = None
        return gx


class Dense(Layer):
    kind = "Dense"

    def __init__(self, in_features: int, units: int) -> None:
        super().__init__()
        self.in_features = int(in_features)
        self.units = int(units)

    def config(self) -> dict:
        return {"kind": self.kind, "in_features": self.in_features, "units": self.units}

    def output_shape(self, input_shape: Shape) -> Shape:
        if tuple(input_shape) != (self.in_features,):
            raise ShapeError(f"{self!r} cannot take input shape {input_shape}")
        return (self.units,)

    def param_shapes(self) -> dict[str, Shape]:
        return {"kernel": (self.in_features, self.units), "bias": (self.units,)}

    def materialize(self, rng: np.random.Generator) -> None:
        self.params["kernel"] = glorot_uniform(
            rng, (self.in_features, self.units), self.in_features, self.units
        )
        self.params["bias"] = np.zeros(self.units, dtype=DTYPE)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        out = dense_forward(x, self.params["kernel"], self.params["bias"])
        self._cache = x if training else None
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        gx, gw, gb = dense_backward(self._cache, self.params["kernel"], grad_out)
        self.grads["kernel"] = gw
        self.grads["bias"] = gb
        self._cache = None
        return gx


class BatchNorm(Layer):
    kind = "BatchNorm"

    def __init__(self, features: int, momentum: float = 0.9, epsilon: float = 1e-3) -> None:
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must be in (0, 1), got {momentum}")
        if epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        self.features = int(features)
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)

    def config(self) -> dict:
        return {"kind": self.kind, "features": self.features,
                "momentum": self.momentum, "epsilon": self.epsilon}

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) not in (1, 3) or input_shape[0] != self.features:
            raise ShapeError(f"{self!r} cannot take input shape {input_shape}")
        return input_shape

    def param_shapes(self) -> dict[str, Shape]:
        return {"gamma": (self.features,), "beta": (self.features,)}

    def state_shapes(self) -> dict[str, Shape]:
        return {"moving_mean": (self.features,), "moving_variance": (self.features,)}

    def materialize(self, rng: np.random.Generator) -> None:
        self.params["gamma"] = np.ones(self.features, dtype=DTYPE)
        self.params["beta"] = np.zeros(self.features, dtype=DTYPE)
        self.state["moving_mean"] = np.zeros(self.features, dtype=DTYPE)
        self.state["moving_variance"] = np.ones(self.features, dtype=DTYPE)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        out, self._cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.state["moving_mean"], self.state["moving_variance"],
            training=training, momentum=self.momentum, epsilon=self.epsilon,
        )
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        gx, gg, gb = batchnorm_backward(self._cache, grad_out)
        self.grads["gamma"] = gg
        self.grads["beta"] = gb
        self._cache = None
        return gx


class LeakyReLU(Layer):
    kind = "LeakyReLU"

    def __init__(self, alpha: float = 0.3) -> None:
        super().__init__()
        if alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {alpha}")
        self.alpha = float(alpha)

    def config(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha}

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        out = leaky_relu_forward(x, self.alpha)
        # out > 0 exactly where x > 0, so the output doubles as the backward cache.
        self._cache = out if training else None
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        out, self._cache = self._cache, None
        return leaky_relu_backward(out, grad_out, self.alpha)

    def __repr__(self) -> str:
        return "ReLU()" if self.alpha == 0 else f"LeakyReLU(alpha={self.alpha})"


class MaxPool2D(Layer):
    kind = "MaxPool2D"

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3 or input_shape[1] < 2 or input_shape[2] < 2:
            raise ShapeError(f"MaxPool2D cannot take input shape {input_shape}")
        c, h, w = input_shape
        return (c, h // 2, w // 2)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        out, argmax = maxpool2d_forward(x)
        self._cache = (argmax, x.shape) if training else None
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        argmax, shape = self._cache
        self._cache = None
        return maxpool2d_backward(argmax, grad_out, shape)


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3:
            raise ShapeError(f"Flatten expects a (C, H, W) input, got {input_shape}")
        return (int(np.prod(input_shape)),)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        self._cache = x.shape if training else None
        return flatten(x)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        shape, self._cache = self._cache, None
        return grad_out.reshape(shape)


class Dropout(Layer):
    kind = "Dropout"

    def __init__(self, rate: float = 0.1) -> None:
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self.rng = np.random.default_rng(0)

    def config(self) -> dict:
        return {"kind": self.kind, "rate": self.rate}

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        out, mask = dropout_forward(x, self.rate, training, self.rng)
        self._cache = mask
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        mask, self._cache = self._cache, None
        return dropout_backward(mask, grad_out)


class Sigmoid(Layer):
    kind = "Sigmoid"

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        out = sigmoid_forward(x)
        self._cache = out if training else None
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        out, self._cache = self._cache, None
        return sigmoid_backward(out, grad_out)


LAYER_TYPES: dict[str, type[Layer]] = {
    cls.kind: cls
    for cls in (Conv2D, BatchNorm, LeakyReLU, MaxPool2D, Flatten, Dense, Dropout, Sigmoid)
}


def layer_from_config(config: dict) -> Layer:
    config = dict(config)
    kind = config.pop("kind", None)
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_TYPES[kind](**config)
