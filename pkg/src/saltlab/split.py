"""Frozen head/tail partitioning and trainable feature adapters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .nn import LayerSpec, Network
from .rng import as_stream

DESK_INPUT_SHAPE = (1, 16, 16)
DESK_SPLIT_POINTS = ("BeforeBlock1", "AfterBlock1", "AfterBlock2", "AfterBlock3")
DEFAULT_SPLIT_POINT = "AfterBlock2"


def desk_backbone_spec(num_classes: int = 8) -> tuple[list[LayerSpec], dict[str, int]]:
    """Seven 3x3 convolutions plus a linear classifier on 1x16x16 inputs.

    Stem conv (8 channels) with 2x2 pooling, then three blocks of two
    convolutions (16, 16, 32 channels); blocks 2 and 3 open with 2x2
    pooling.  Latent shapes: BeforeBlock1 8x8x8, AfterBlock1 16x8x8,
    AfterBlock2 16x4x4, AfterBlock3 32x2x2.
    """
    def convs(channels):
        return [nn.conv(channels), nn.batchnorm(), nn.relu(),
                nn.conv(channels), nn.batchnorm(), nn.relu()]

    stem = [nn.conv(8), nn.batchnorm(), nn.relu(), nn.maxpool()]
    specs = (stem + convs(16) + [nn.maxpool()] + convs(16) + [nn.maxpool()] + convs(32)
             + [nn.flatten(), nn.linear(num_classes)])
    boundaries = {"BeforeBlock1": 4, "AfterBlock1": 10, "AfterBlock2": 17, "AfterBlock3": 24}
    return specs, boundaries


def build_backbone(specs, input_shape, seed, boundaries: dict[str, int] | None = None) -> Network:
    return nn.build_network(specs, input_shape, as_stream(seed, "init"), boundaries)


def build_desk_backbone(seed, num_classes: int = 8) -> Network:
    specs, boundaries = desk_backbone_spec(num_classes)
    return build_backbone(specs, DESK_INPUT_SHAPE, seed, boundaries)


@dataclass
class SplitModel:
    head: Network
    tail: Network
    split_point: str
    input_shape: tuple[int, ...]
    latent_shape: tuple[int, ...]

    @property
    def num_classes(self) -> int:
        return self.tail.output_shape[0]

    def digests(self) -> tuple[str, str]:
        return nn.param_digest(self.head), nn.param_digest(self.tail)


def split_at(backbone: Network, split_point: str) -> SplitModel:
    """Partition ``backbone`` at a named boundary; both halves come back frozen.

    The halves share layer objects with ``backbone``.
    """
    if split_point not in backbone.boundaries:
        raise ConfigurationError(f"unknown split point {split_point!r}; "
                                 f"known: {sorted(backbone.boundaries)}")
    idx = backbone.boundaries[split_point]
    latent = backbone.shape_at(idx)
    head = Network(backbone.layers[:idx], backbone.input_shape).freeze().eval()
    tail = Network(backbone.layers[idx:], latent).freeze().eval()
    return SplitModel(head, tail, split_point, backbone.input_shape, latent)


def forward_head(model: SplitModel, x) -> T.Tensor:
    """z = H(x) with the frozen head in eval mode; no graph is recorded."""
    x = T.as_tensor(x)
    if x.shape[1:] != model.input_shape:
        raise DimensionError(f"head expects [N, {model.input_shape}], got {x.shape}")
    model.head.eval()
    with T.no_grad():
        return model.head(x) if model.head.layers else T.Tensor(x.data)


def forward_tail(model: SplitModel, z) -> T.Tensor:
    """Logits T(z) with the frozen tail in eval mode; records a graph if ``z`` requires grad."""
    z = T.as_tensor(z)
    if z.shape[1:] != model.latent_shape:
        raise DimensionError(f"tail expects [N, {model.latent_shape}], got {z.shape}")
    model.tail.eval()
    return model.tail(z)


ADAPTER_VARIANTS = ("residual", "insertion")


def adapter_specs(channels: int) -> list[LayerSpec]:
    return [nn.conv(channels), nn.batchnorm(), nn.relu(),
            nn.conv(channels), nn.batchnorm(), nn.relu(),
            nn.conv(channels, kernel=1)]


class Adapter:
    """Trainable feature adapter S operating on latent tensors of a fixed shape.

    The residual variant emits z + S(z); its last 1x1 convolution starts at
    zero, so a fresh adapter is the identity.  The insertion variant emits
    S(z) and its last convolution starts as the identity kernel.
    """

    def __init__(self, latent_shape, variant: str = "residual", seed=0):
        if variant not in ADAPTER_VARIANTS:
            raise ConfigurationError(f"unknown adapter variant {variant!r}")
        latent_shape = tuple(latent_shape)
        if len(latent_shape) != 3:
            raise ConfigurationError(f"adapters operate on CxHxW features, got {latent_shape}")
        self.variant = variant
        self.latent_shape = latent_shape
        self.network = nn.build_network(adapter_specs(latent_shape[0]), latent_shape, as_stream(seed, "init"))
        last = self.network.layers[-1]
        last.bias.data[...] = 0
        if variant == "residual":
            last.weight.data[...] = 0
        else:
            last.weight.data[...] = np.eye(latent_shape[0], dtype=last.weight.dtype)[:, :, None, None]
        self.network.unfreeze()

    def parameters(self) -> list[T.Parameter]:
        return self.network.parameters()

    def train(self, mode: bool = True) -> Adapter:
        self.network.train(mode)
        return self

    def eval(self) -> Adapter:
        return self.train(False)

    def state(self):
        return self.network.state()

    def load_state(self, arrays) -> None:
        self.network.load_state(arrays)

    def digest(self) -> str:
        return nn.param_digest(self.network)

    def __call__(self, z):
        return adapter_apply(self, z)


def adapter_apply(adapter: Adapter, z) -> T.Tensor:
    z = T.as_tensor(z)
    if z.shape[1:] != adapter.latent_shape:
        raise DimensionError(f"adapter expects [N, {adapter.latent_shape}], got {z.shape}")
    correction = adapter.network(z)
    return T.add(z, correction) if adapter.variant == "residual" else correction
