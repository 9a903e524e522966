"""TeliNet and VGG-16 builders, shape validation and parameter accounting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    LeakyReLU,
    MaxPool2D,
    Sigmoid,
    layer_from_config,
)
from .tensor import ShapeError

Shape = tuple[int, ...]

# Offsets keeping the per-layer init streams apart from the dropout streams.
_DROPOUT_STREAM = 1_000_003


@dataclass
class ModelSpec:
    """Serializable description of a layer stack.

    ``layers`` holds one plain dict per layer (``{"kind": ..., **hyperparameters}``),
    including explicit input dimensions for Conv2D/Dense/BatchNorm so that
    hand-edited specs can be validated against their neighbours.
    """

    name: str
    input_shape: Shape
    layers: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape), "layers": self.layers}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(
            name=str(data["name"]),
            input_shape=tuple(int(d) for d in data["input_shape"]),
            layers=[dict(layer) for layer in data["layers"]],
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ModelSpec) and self.to_json() == other.to_json()


@dataclass(frozen=True)
class TeliNetConfig:
    channels: int = 1
    input_size: int = 256
    filters: tuple[int, int, int, int] = (16, 32, 32, 32)
    dense_units: int = 256
    leaky_alpha: float = 0.3
    dropout_rate: float = 0.10
    # False applies dropout only after the second dense block.
    dropout_after_both_dense: bool = True
    # 0.99 leaves the running statistics dominated by their initial values
    # after a few dozen steps, which breaks inference on short runs.
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-3


@dataclass(frozen=True)
class VGG16Config:
    channels: int = 3
    input_size: int = 224
    blocks: tuple[tuple[int, ...], ...] = ((64, 64), (128, 128), (256, 256, 256),
                                           (512, 512, 512), (512, 512, 512))
    dense_units: int = 4096


class Model:
    """An ordered layer stack built from a :class:`ModelSpec`.

    Weights are materialized on first use from ``seed``; each layer draws
    from its own generator keyed on ``(seed, layer index)``, so the result
    does not depend on materialization order.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0) -> None:
        self.spec = spec
        self.seed = int(seed)
        self.layers: list[Layer] = []
        self.shapes: list[Shape] = []
        shape = tuple(spec.input_shape)
        counts: dict[str, int] = {}
        for i, layer_config in enumerate(spec.layers):
            layer = layer_from_config(layer_config)
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer!r}): {exc}") from None
            n = counts.get(layer.kind, 0)
            counts[layer.kind] = n + 1
            layer.name = f"{_snake(layer.kind)}_{n}"
            self.layers.append(layer)
            self.shapes.append(shape)
        # The network input needs no gradient.
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                layer.need_input_grad = False
                break
            if layer.param_shapes():
                break
        self.reseed_dropout(0)
        # LeakyReLU is monotone non-decreasing, so it commutes with max pooling:
        # pooling first runs the activation on a quarter of the elements.
        self._order = list(range(len(self.layers)))
        for i in range(len(self.layers) - 1):
            if isinstance(self.layers[i], LeakyReLU) and isinstance(self.layers[i + 1], MaxPool2D):
                self._order[i], self._order[i + 1] = i + 1, i

    # parameters ------------------------------------------------------------
    def materialize(self) -> None:
        for i, layer in enumerate(self.layers):
            if not layer.materialized:
                layer.materialize(np.random.default_rng([self.seed, i]))

    def parameters(self) -> dict[str, np.ndarray]:
        self.materialize()
        return {f"{layer.name}/{k}": v for layer in self.layers for k, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{layer.name}/{k}": v for layer in self.layers for k, v in layer.grads.items()}

    def states(self) -> dict[str, np.ndarray]:
        self.materialize()
        return {f"{layer.name}/{k}": v for layer in self.layers for k, v in layer.state.items()}

    def parameter_shapes(self) -> dict[str, Shape]:
        return {f"{layer.name}/{k}": s for layer in self.layers for k, s in layer.param_shapes().items()}

    def state_shapes(self) -> dict[str, Shape]:
        return {f"{layer.name}/{k}": s for layer in self.layers for k, s in layer.state_shapes().items()}

    def assign(self, params: dict[str, np.ndarray], states: dict[str, np.ndarray]) -> None:
        """Install parameter and state tensors by qualified name."""
        expected = {**self.parameter_shapes(), **self.state_shapes()}
        given = {**params, **states}
        if set(expected) != set(given):
            missing = sorted(set(expected) - set(given))
            extra = sorted(set(given) - set(expected))
            raise ShapeError(f"tensor names do not match the model (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if tuple(given[name].shape) != tuple(shape):
                raise ShapeError(f"{name} has shape {given[name].shape}, model expects {shape}")
        by_name = {layer.name: layer for layer in self.layers}
        for name, value in params.items():
            lname, key = name.split("/", 1)
            by_name[lname].params[key] = value
        for name, value in states.items():
            lname, key = name.split("/", 1)
            by_name[lname].state[key] = value

    def count_trainable_params(self) -> int:
        return sum(layer.count_params() for layer in self.layers)

    def reseed_dropout(self, epoch: int) -> None:
        """Give every dropout layer a generator keyed on (seed, epoch, layer)."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                layer.rng = np.random.default_rng([self.seed, _DROPOUT_STREAM, epoch, i])

    # computation -------------------------------------------------------------
    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        expected = tuple(self.spec.input_shape)
        if x.ndim != len(expected) + 1 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"model {self.spec.name} expects input (N, {expected}), got {x.shape}")
        self.materialize()
        for i in self._order:
            x = self.layers[i].forward(x, training=training)
        return x

    __call__ = forward

    def backward(self, grad_out: np.ndarray) -> None:
        g = grad_out
        for i in reversed(self._order):
            g = self.layers[i].backward(g)
            if g is None:
                break

    def clear_caches(self) -> None:
        for layer in self.layers:
            layer.clear_cache()

    def summary(self) -> str:
        return model_summary(self)

    def iter_layers(self) -> Iterator[tuple[Layer, Shape]]:
        return zip(self.layers, self.shapes)


def _snake(kind: str) -> str:
    out = []
    for i, ch in enumerate(kind):
        if ch.isupper() and i and not kind[i - 1].isupper() and not kind[i - 1].isdigit():
            out.append("_")
        out.append(ch.lower())
    return "".join(out)


def telinet_spec(config: TeliNetConfig = TeliNetConfig()) -> ModelSpec:
    """Layer list of TeliNet.

    Conv(16) -> LeakyReLU, then three Conv -> BatchNorm -> LeakyReLU -> MaxPool
    blocks, Flatten, two Dense(256) -> BatchNorm -> LeakyReLU -> Dropout blocks
    and a Dense(1) -> Sigmoid head.
    """
    c = config
    size = c.input_size
    layers: list[dict] = [
        Conv2D(c.channels, c.filters[0]).config(),
        LeakyReLU(c.leaky_alpha).config(),
    ]
    in_ch = c.filters[0]
    for f in c.filters[1:]:
        layers += [
            Conv2D(in_ch, f).config(),
            BatchNorm(f, c.bn_momentum, c.bn_epsilon).config(),
            LeakyReLU(c.leaky_alpha).config(),
            MaxPool2D().config(),
        ]
        in_ch = f
        size //= 2
    layers.append(Flatten().config())
    in_features = in_ch * size * size
    for block in range(2):
        layers += [
            Dense(in_features, c.dense_units).config(),
            BatchNorm(c.dense_units, c.bn_momentum, c.bn_epsilon).config(),
            LeakyReLU(c.leaky_alpha).config(),
        ]
        if c.dropout_after_both_dense or block == 1:
            layers.append(Dropout(c.dropout_rate).config())
        in_features = c.dense_units
    layers += [Dense(in_features, 1).config(), Sigmoid().config()]
    return ModelSpec("telinet", (c.channels, c.input_size, c.input_size), layers)


def vgg16_spec(config: VGG16Config = VGG16Config()) -> ModelSpec:
    """Canonical 13-conv / 3-dense VGG-16 with a single sigmoid output."""
    c = config
    layers: list[dict] = []
    in_ch, size = c.channels, c.input_size
    for block in c.blocks:
        for f in block:
            layers += [Conv2D(in_ch, f).config(), LeakyReLU(0.0).config()]
            in_ch = f
        layers.append(MaxPool2D().config())
        size //= 2
    layers.append(Flatten().config())
    in_features = in_ch * size * size
    for _ in range(2):
        layers += [Dense(in_features, c.dense_units).config(), LeakyReLU(0.0).config()]
        in_features = c.dense_units
    layers += [Dense(in_features, 1).config(), Sigmoid().config()]
    return ModelSpec("vgg16", (c.channels, c.input_size, c.input_size), layers)


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    return Model(spec, seed)


def build_telinet(seed: int = 0, config: TeliNetConfig = TeliNetConfig()) -> Model:
    return Model(telinet_spec(config), seed)


def build_vgg16(seed: int = 0, config: VGG16Config = VGG16Config()) -> Model:
    return Model(vgg16_spec(config), seed)


def count_trainable_params(model: Model) -> int:
    """Number of trainable scalars; batch-norm running statistics are excluded."""
    return model.count_trainable_params()


def init_weights(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """Freshly initialized trainable parameters and state for ``spec``.

    Glorot-uniform conv/dense kernels, zero biases and betas, unit gammas,
    zero running means and unit running variances.
    """
    model = Model(spec, seed)
    return {**model.parameters(), **model.states()}


def model_summary(model: Model) -> str:
    rows = [("Layer (type)", "Output Shape", "Param #")]
    for layer, shape in model.iter_layers():
        rows.append((f"{layer.name} ({layer.kind})", str((None,) + tuple(shape)), f"{layer.count_params():,}"))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    rule = "-" * (sum(widths) + 6)
    lines = [f'Model: "{model.spec.name}"', rule]
    for j, row in enumerate(rows):
        lines.append(f"{row[0]:<{widths[0]}}   {row[1]:<{widths[1]}}   {row[2]:>{widths[2]}}")
        if j == 0:
            lines.append("=" * len(rule))
    lines.append("=" * len(rule))
    lines.append(f"Trainable params: {model.count_trainable_params():,}")
    non_trainable = sum(int(np.prod(s)) for s in model.state_shapes().values())
    lines.append(f"Non-trainable params: {non_trainable:,}")
    return "\n".join(lines)
