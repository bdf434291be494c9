"""Layer specs, layer objects and sequential networks built on ``saltlab.tensor``."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConstructionError, DimensionError
from .rng import RngStream, as_stream

LAYER_KINDS = ("conv", "batchnorm", "relu", "maxpool", "flatten", "linear", "upsample")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    Sizes that follow from the incoming shape (input channels, features) are
    inferred when the layer spec is instantiated.
    """

    kind: str
    channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConstructionError(f"unknown layer kind {self.kind!r}")


def conv(channels: int, kernel: int = 3, stride: int = 1, padding: int | None = None) -> LayerSpec:
    return LayerSpec("conv", channels=channels, kernel=kernel, stride=stride,
                     padding=kernel // 2 if padding is None else padding)


def batchnorm() -> LayerSpec:
    return LayerSpec("batchnorm")


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(kernel: int = 2, stride: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", kernel=kernel, stride=stride)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def linear(out_features: int) -> LayerSpec:
    return LayerSpec("linear", out_features=out_features)


def upsample(factor: int = 2) -> LayerSpec:
    return LayerSpec("upsample", kernel=factor)


class Layer:
    training = False

    def __init__(self, spec: LayerSpec, in_shape: tuple[int, ...]):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.out_shape = self.in_shape

    def parameters(self) -> list[T.Parameter]:
        return []

    def buffers(self) -> list[np.ndarray]:
        return []

    def forward(self, x: T.Tensor) -> T.Tensor:
        raise NotImplementedError

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return self.forward(x)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.in_shape} -> {self.out_shape})"


def _he_uniform(rng: RngStream, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


class Conv2d(Layer):
    def __init__(self, spec, in_shape, rng: RngStream):
        super().__init__(spec, in_shape)
        if len(in_shape) != 3:
            raise ConstructionError(f"conv needs a CxHxW input, got {in_shape}")
        c, h, w = in_shape
        k, s, p = spec.kernel, spec.stride, spec.padding
        if spec.channels < 1 or k < 1 or s < 1:
            raise ConstructionError(f"invalid conv spec {spec}")
        span_h, span_w = h + 2 * p - k, w + 2 * p - k
        if span_h < 0 or span_w < 0 or span_h % s or span_w % s:
            raise ConstructionError(f"conv {spec} does not tile a {h}x{w} input")
        self.out_shape = (spec.channels, span_h // s + 1, span_w // s + 1)
        self.weight = T.Parameter(_he_uniform(rng, (spec.channels, c, k, k), c * k * k), name="weight")
        self.bias = T.Parameter(np.zeros(spec.channels, np.float32), name="bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)


class BatchNorm2d(Layer):
    momentum = 0.1
    eps = 1e-5

    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        if len(in_shape) != 3:
            raise ConstructionError(f"batchnorm needs a CxHxW input, got {in_shape}")
        c = in_shape[0]
        self.gamma = T.Parameter(np.ones(c, np.float32), name="gamma")
        self.beta = T.Parameter(np.zeros(c, np.float32), name="beta")
        self.running_mean = np.zeros(c, np.float32)
        self.running_var = np.ones(c, np.float32)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def forward(self, x):
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class ReLU(Layer):
    def forward(self, x):
        return T.relu(x)


class MaxPool2d(Layer):
    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        c, h, w = in_shape
        k, s = spec.kernel, spec.stride
        if h % s or w % s or h < k or w < k:
            raise ConstructionError(f"maxpool {spec} does not tile a {h}x{w} input")
        self.out_shape = (c, (h - k) // s + 1, (w - k) // s + 1)

    def forward(self, x):
        return T.maxpool2d(x, self.spec.kernel, self.spec.stride)


class Flatten(Layer):
    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        self.out_shape = (int(np.prod(in_shape)),)

    def forward(self, x):
        return T.flatten(x)


class Linear(Layer):
    def __init__(self, spec, in_shape, rng: RngStream):
        super().__init__(spec, in_shape)
        if len(in_shape) != 1:
            raise ConstructionError(f"linear needs a flat input, got {in_shape}; add a flatten layer")
        if spec.out_features < 1:
            raise ConstructionError(f"invalid linear spec {spec}")
        self.out_shape = (spec.out_features,)
        self.weight = T.Parameter(_he_uniform(rng, (spec.out_features, in_shape[0]), in_shape[0]), name="weight")
        self.bias = T.Parameter(np.zeros(spec.out_features, np.float32), name="bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Upsample(Layer):
    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        c, h, w = in_shape
        self.out_shape = (c, h * spec.kernel, w * spec.kernel)

    def forward(self, x):
        return T.upsample_nearest(x, self.spec.kernel)


def make_layer(spec: LayerSpec, in_shape: tuple[int, ...], rng: RngStream) -> Layer:
    if spec.kind in ("conv", "batchnorm", "relu", "maxpool", "upsample") and len(in_shape) != 3:
        raise ConstructionError(f"{spec.kind} layer needs a CxHxW input, got {in_shape}")
    if spec.kind == "conv":
        return Conv2d(spec, in_shape, rng)
    if spec.kind == "batchnorm":
        return BatchNorm2d(spec, in_shape)
    if spec.kind == "relu":
        return ReLU(spec, in_shape)
    if spec.kind == "maxpool":
        return MaxPool2d(spec, in_shape)
    if spec.kind == "flatten":
        return Flatten(spec, in_shape)
    if spec.kind == "linear":
        return Linear(spec, in_shape, rng)
    return Upsample(spec, in_shape)


class Network:
    """A sequential stack of layers with an optional table of named boundaries.

    ``boundaries`` maps a name to the index of the first layer *after* the
    boundary, so boundary 0 precedes every layer.
    """

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int],
                 boundaries: dict[str, int] | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.boundaries = dict(boundaries or {})
        for name, idx in self.boundaries.items():
            if not 0 <= idx <= len(self.layers):
                raise ConstructionError(f"boundary {name!r} at {idx} is outside 0..{len(self.layers)}")
        self.training = False

    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.layers[-1].out_shape if self.layers else self.input_shape

    def shape_at(self, index: int) -> tuple[int, ...]:
        return self.layers[index].in_shape if index < len(self.layers) else self.output_shape

    def parameters(self) -> list[T.Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self) -> list[np.ndarray]:
        return [b for layer in self.layers for b in layer.buffers()]

    def train(self, mode: bool = True) -> Network:
        self.training = mode
        for layer in self.layers:
            layer.training = mode
        return self

    def eval(self) -> Network:
        return self.train(False)

    def freeze(self) -> Network:
        for p in self.parameters():
            p.trainable = False
        return self

    def unfreeze(self) -> Network:
        for p in self.parameters():
            p.trainable = True
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> Network:
        """Convert parameters and buffers in place (grads are dropped)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for layer in self.layers:
            if isinstance(layer, BatchNorm2d):
                layer.running_mean = layer.running_mean.astype(dtype)
                layer.running_var = layer.running_var.astype(dtype)
        return self

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()] + [b.copy() for b in self.buffers()]

    def load_state(self, arrays: Iterable[np.ndarray]) -> None:
        arrays = list(arrays)
        params, buffers = self.parameters(), self.buffers()
        if len(arrays) != len(params) + len(buffers):
            raise DimensionError("state does not match network structure")
        for p, a in zip(params, arrays):
            if a.shape != p.shape:
                raise DimensionError(f"state entry {a.shape} does not match parameter {p.shape}")
            p.data = a.astype(p.dtype, copy=True)
        for b, a in zip(buffers, arrays[len(params):]):
            b[...] = a

    def forward(self, x: T.Tensor) -> T.Tensor:
        x = T.as_tensor(x)
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"network expects inputs shaped [N, {self.input_shape}], got {x.shape}")
        for layer in self.layers:
            x = layer(x)
        return x

    __call__ = forward

    def __repr__(self) -> str:
        body = "\n".join(f"  {i:2d}: {layer!r}" for i, layer in enumerate(self.layers))
        return f"Network(input={self.input_shape})\n{body}"


def build_network(specs: Sequence[LayerSpec], input_shape: Sequence[int], seed,
                  boundaries: dict[str, int] | None = None) -> Network:
    """Instantiate ``specs`` on ``input_shape``; weights are He-uniform from ``seed``.

    ``seed`` is an int or an RngStream; each layer draws from its own fork.
    """
    rng = as_stream(seed)
    shape = tuple(input_shape)
    if not shape or any(d < 1 for d in shape):
        raise ConstructionError(f"invalid input shape {shape}")
    layers = []
    for i, spec in enumerate(specs):
        layer = make_layer(spec, shape, rng.fork(f"layer{i}"))
        layers.append(layer)
        shape = layer.out_shape
    return Network(layers, input_shape, boundaries)


def param_digest(network: Network) -> str:
    """BLAKE2b-128 hex digest of parameter then buffer bytes in declaration order."""
    h = hashlib.blake2b(digest_size=16)
    for arr in [p.data for p in network.parameters()] + network.buffers():
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
