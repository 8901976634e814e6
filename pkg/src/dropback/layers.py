"""Layers with hand-written backward passes and the sequential Network.

Every trainable weight lives in a :class:`ParamTensor` whose first axis is the
channel (conv output channel) or row (dense output feature) axis, the axis the
update masks act on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, StateError


@dataclass(eq=False)
class ParamTensor:
    name: str
    values: np.ndarray
    grad: np.ndarray = None
    momentum: np.ndarray = None
    droppable: bool = True
    # per-channel update mask set by apply_update_mask, consumed by the optimizer
    update_mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=T.DTYPE)
        if self.values.ndim < 1:
            raise DimensionError(f"{self.name}: parameters need rank >= 1")
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.momentum is None:
            self.momentum = np.zeros_like(self.values)
        if not (self.values.shape == self.grad.shape == self.momentum.shape):
            raise DimensionError(
                f"{self.name}: values {self.values.shape}, grad {self.grad.shape} "
                f"and momentum {self.momentum.shape} must agree"
            )

    @property
    def channel_count(self) -> int:
        return self.values.shape[0]


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: list[ParamTensor] = []
        self.cache = None
        self.input_shape: tuple | None = None
        self.output_shape: tuple | None = None

    def build(self, input_shape: tuple, rng: np.random.Generator | None) -> tuple:
        """Create parameters for per-sample ``input_shape``; return output shape."""
        self.input_shape = tuple(input_shape)
        self.output_shape = self._build(self.input_shape, rng)
        return self.output_shape

    def _build(self, input_shape, rng):
        return input_shape

    def forward(self, x: np.ndarray, training: bool, rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, need_input_grad: bool = True):
        raise NotImplementedError

    @property
    def channel_count(self) -> int | None:
        """Length of the drop axis, or None for layers without parameters."""
        return None

    def spec(self) -> str:
        return self.kind

    def _cached(self):
        if self.cache is None:
            raise StateError(f"{self.kind}: backward called without a training forward pass")
        return self.cache


class Dense(Layer):
    kind = "dense"

    def __init__(self, out_features: int):
        super().__init__()
        self.out_features = out_features

    def _build(self, input_shape, rng):
        if len(input_shape) != 1:
            raise DimensionError(f"dense expects flat input, got per-sample shape {input_shape}")
        fan_in = input_shape[0]
        w = kaiming_uniform((self.out_features, fan_in), fan_in, rng) if rng is not None \
            else np.zeros((self.out_features, fan_in))
        self.weight = ParamTensor("weight", w)
        self.bias = ParamTensor("bias", np.zeros(self.out_features))
        self.params = [self.weight, self.bias]
        return (self.out_features,)

    def forward(self, x, training, rng=None):
        y = T.matmul(x, self.weight.values.T) + self.bias.values
        if training:
            self.cache = x
        return y

    def backward(self, grad, need_input_grad=True):
        x = self._cached()
        self.weight.grad[...] = grad.T @ x
        self.bias.grad[...] = grad.sum(axis=0)
        return grad @ self.weight.values if need_input_grad else None

    @property
    def channel_count(self):
        return self.out_features

    def spec(self):
        return f"dense:{self.out_features}"


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, out_channels: int, kernel: int = 3, stride: int = 1, padding: int = 0):
        super().__init__()
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def _build(self, input_shape, rng):
        if len(input_shape) != 3:
            raise DimensionError(f"conv2d expects (C, H, W) input, got {input_shape}")
        cin, h, w = input_shape
        k = self.kernel
        if k > h + 2 * self.padding or k > w + 2 * self.padding:
            raise DimensionError(f"conv2d: kernel {k} larger than padded input {h}x{w}")
        shape = (self.out_channels, cin, k, k)
        fan_in = cin * k * k
        wv = kaiming_uniform(shape, fan_in, rng) if rng is not None else np.zeros(shape)
        self.weight = ParamTensor("weight", wv)
        self.bias = ParamTensor("bias", np.zeros(self.out_channels))
        self.params = [self.weight, self.bias]
        return (
            self.out_channels,
            T.conv_output_size(h, k, self.stride, self.padding),
            T.conv_output_size(w, k, self.stride, self.padding),
        )

    def forward(self, x, training, rng=None):
        y = T.conv2d(x, self.weight.values, self.stride, self.padding)
        y += self.bias.values[None, :, None, None]
        if training:
            self.cache = x
        return y

    def backward(self, grad, need_input_grad=True):
        x = self._cached()
        gx, gw = T.conv2d_grads(x, self.weight.values, grad, self.stride, self.padding)
        self.weight.grad[...] = gw
        self.bias.grad[...] = grad.sum(axis=(0, 2, 3))
        return gx

    @property
    def channel_count(self):
        return self.out_channels

    def spec(self):
        return f"conv:{self.out_channels}:{self.kernel}:{self.stride}:{self.padding}"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training, rng=None):
        if training:
            self.cache = x
        return T.relu(x)

    def backward(self, grad, need_input_grad=True):
        return T.relu_grad(self._cached(), grad)


class Flatten(Layer):
    kind = "flatten"

    def _build(self, input_shape, rng):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training, rng=None):
        if training:
            self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, need_input_grad=True):
        return grad.reshape(self._cached())


class AvgPool2D(Layer):
    kind = "avgpool2d"

    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def _build(self, input_shape, rng):
        if len(input_shape) != 3:
            raise DimensionError(f"avgpool2d expects (C, H, W) input, got {input_shape}")
        c, h, w = input_shape
        if h // self.size < 1 or w // self.size < 1:
            raise DimensionError(f"avgpool2d: window {self.size} larger than {h}x{w}")
        return (c, h // self.size, w // self.size)

    def forward(self, x, training, rng=None):
        if training:
            self.cache = x.shape
        return T.avgpool2d(x, self.size)

    def backward(self, grad, need_input_grad=True):
        return T.avgpool2d_grad(self._cached(), grad, self.size)

    def spec(self):
        return f"avgpool:{self.size}"


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/keep_prob during training."""

    kind = "dropout"

    def __init__(self, keep_prob: float = 0.7):
        super().__init__()
        if not 0.0 < keep_prob <= 1.0:
            raise ConfigError(f"dropout keep_prob must be in (0, 1], got {keep_prob}")
        self.keep_prob = keep_prob

    def forward(self, x, training, rng=None):
        if not training:
            return x
        if rng is None:
            raise StateError("dropout needs an rng in training mode")
        scale = (rng.random(x.shape) < self.keep_prob) / self.keep_prob
        self.cache = scale
        return x * scale

    def backward(self, grad, need_input_grad=True):
        return grad * self._cached()

    def spec(self):
        return f"dropout:{self.keep_prob!r}"


class ResidualBlock(Layer):
    """relu(conv2(relu(conv1(x))) + skip(x)) with 3x3 convs.

    The skip path is the identity when shapes allow it, otherwise a strided
    1x1 projection. Selected for dropping as one unit.
    """

    kind = "residual_block"

    def __init__(self, out_channels: int, stride: int = 1):
        super().__init__()
        self.out_channels = out_channels
        self.stride = stride

    def _build(self, input_shape, rng):
        if len(input_shape) != 3:
            raise DimensionError(f"residual block expects (C, H, W) input, got {input_shape}")
        self.conv1 = Conv2D(self.out_channels, 3, self.stride, 1)
        self.conv2 = Conv2D(self.out_channels, 3, 1, 1)
        mid = self.conv1.build(input_shape, rng)
        out = self.conv2.build(mid, rng)
        if input_shape[0] != self.out_channels or self.stride != 1:
            self.proj = Conv2D(self.out_channels, 1, self.stride, 0)
            skip = self.proj.build(input_shape, rng)
        else:
            self.proj = None
            skip = input_shape
        if skip != out:
            raise DimensionError(f"residual block: main path {out} vs skip path {skip}")
        self.params = []
        for prefix, sub in (("conv1", self.conv1), ("conv2", self.conv2), ("proj", self.proj)):
            if sub is None:
                continue
            for p in sub.params:
                p.name = f"{prefix}.{p.name}"
                self.params.append(p)
        return out

    def forward(self, x, training, rng=None):
        h1 = self.conv1.forward(x, training)
        a1 = T.relu(h1)
        h2 = self.conv2.forward(a1, training)
        skip = x if self.proj is None else self.proj.forward(x, training)
        if h2.shape != skip.shape:
            raise DimensionError(f"residual block: main path {h2.shape} vs skip {skip.shape}")
        z = h2 + skip
        if training:
            self.cache = (h1, z)
        return T.relu(z)

    def backward(self, grad, need_input_grad=True):
        h1, z = self._cached()
        gz = T.relu_grad(z, grad)
        ga1 = self.conv2.backward(gz)
        gx = self.conv1.backward(T.relu_grad(h1, ga1))
        if self.proj is None:
            return gx + gz
        return gx + self.proj.backward(gz)

    @property
    def channel_count(self):
        return self.out_channels

    def spec(self):
        return f"res:{self.out_channels}:{self.stride}"


class Network:
    """Ordered stack of layers; ``mode`` is ``"train"`` or ``"eval"``."""

    def __init__(self, layers, input_shape, rng: np.random.Generator | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.mode = "train"
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.build(shape, rng)
            except DimensionError as e:
                raise DimensionError(f"layer {i} ({layer.kind}): {e}") from None
            for p in layer.params:
                p.name = f"{i}.{p.name}"
        self.output_shape = shape

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def params(self) -> list[ParamTensor]:
        return [p for layer in self.layers for p in layer.params]

    def forward(self, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """Logits for a batch. Caches activations only in train mode."""
        training = self.mode == "train"
        if x.shape[1:] != self.input_shape:
            raise DimensionError(
                f"layer 0 ({self.layers[0].kind if self.layers else 'input'}): "
                f"input per-sample shape {x.shape[1:]} != expected {self.input_shape}"
            )
        for i, layer in enumerate(self.layers):
            if not training:
                layer.cache = None
            try:
                x = layer.forward(x, training, rng)
            except DimensionError as e:
                raise DimensionError(f"layer {i} ({layer.kind}): {e}") from None
        return x

    def backward(self, grad_logits: np.ndarray) -> None:
        """Fill every ParamTensor.grad with the full (unmasked) gradient."""
        grad = grad_logits
        for i in range(len(self.layers) - 1, -1, -1):
            grad = self.layers[i].backward(grad, need_input_grad=i > 0)

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0.0

    def describe(self) -> str:
        shape = "x".join(str(s) for s in self.input_shape)
        return shape + "|" + ",".join(layer.spec() for layer in self.layers)


def network_forward(net: Network, x, rng=None):
    return net.forward(x, rng)


def network_backward(net: Network, grad_logits) -> None:
    net.backward(grad_logits)


def droppable_layer_indices(net: Network) -> list[int]:
    return [
        i for i, layer in enumerate(net.layers)
        if any(p.droppable for p in layer.params)
    ]


_LAYER_PARSERS = {
    "dense": lambda a: Dense(int(a[0])),
    "conv": lambda a: Conv2D(*(int(v) for v in a)),
    "relu": lambda a: ReLU(),
    "flatten": lambda a: Flatten(),
    "avgpool": lambda a: AvgPool2D(*(int(v) for v in a)),
    "res": lambda a: ResidualBlock(*(int(v) for v in a)),
    "dropout": lambda a: Dropout(*(float(v) for v in a)),
}


def parse_layers(spec: str) -> list[Layer]:
    """Parse ``"conv:8:3:1:1,relu,flatten,dense:3"`` into fresh layers.

    Tokens: ``dense:OUT``, ``conv:OUT[:K[:STRIDE[:PAD]]]``, ``relu``,
    ``flatten``, ``avgpool[:K]``, ``res:OUT[:STRIDE]``, ``dropout[:KEEP]``.
    """
    layers = []
    for token in filter(None, (t.strip() for t in spec.split(","))):
        name, *args = token.split(":")
        if name not in _LAYER_PARSERS:
            raise ConfigError(f"unknown layer {name!r} in {spec!r}")
        try:
            layers.append(_LAYER_PARSERS[name](args))
        except (TypeError, ValueError, IndexError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"bad layer token {token!r}: {e}") from None
    return layers


def parse_shape(text: str) -> tuple:
    try:
        return tuple(int(s) for s in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"bad shape {text!r}, expected e.g. 1x8x8") from None


def build_network(spec: str, input_shape=None, rng=None) -> Network:
    """Build a network from a layer spec.

    ``spec`` may carry its input shape as ``"1x8x8|conv:4,relu,..."`` (the
    form produced by :meth:`Network.describe`); otherwise pass ``input_shape``.
    """
    if "|" in spec:
        shape_text, spec = spec.split("|", 1)
        if input_shape is None:
            input_shape = parse_shape(shape_text)
    if input_shape is None:
        raise ConfigError("build_network needs an input shape")
    return Network(parse_layers(spec), input_shape, rng)
