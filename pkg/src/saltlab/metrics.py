"""Communication latency model, classification accuracy and SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError

DEFAULT_BANDWIDTH = 80e6  # bits per second


@dataclass(frozen=True)
class LatencyModel:
    feature_size_bits: float
    batch_size: int
    samples: int = 1
    epochs: int = 1
    bandwidth_bits_per_s: float = DEFAULT_BANDWIDTH

    def __post_init__(self):
        if min(self.feature_size_bits, self.batch_size, self.samples, self.epochs,
               self.bandwidth_bits_per_s) <= 0:
            raise ConfigurationError("latency model fields must all be positive")


def feature_size_bits(shape, dtype=np.float32) -> int:
    """Payload bits of one sample's feature tensor (no framing overhead)."""
    return int(np.prod(shape)) * np.dtype(dtype).itemsize * 8


def comm_latency_per_batch(m: LatencyModel) -> float:
    """Forward features plus backward gradients for one mini-batch: 2 V B / theta."""
    return 2 * (m.feature_size_bits * m.batch_size) / m.bandwidth_bits_per_s


def batches_per_epoch(samples: int, batch_size: int) -> int:
    return math.ceil(samples / batch_size)


def total_comm_latency(m: LatencyModel) -> float:
    return (m.epochs * batches_per_epoch(m.samples, m.batch_size)) * comm_latency_per_batch(m)


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if predictions.shape != labels.shape:
        raise DimensionError("predictions and labels differ in length")
    if labels.size == 0:
        return 0.0
    return float(np.count_nonzero(predictions == labels)) / labels.size


def predict(logits) -> np.ndarray:
    """Arg-max class per row; ties resolve to the lowest class index."""
    return np.asarray(logits).argmax(axis=1)


@dataclass(frozen=True)
class SsimParams:
    data_range: float = 1.0
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.data_range <= 0:
            raise ConfigurationError("SSIM dynamic range must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigurationError("SSIM window side must be odd")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


def _ssim_plane(x: np.ndarray, y: np.ndarray, params: SsimParams) -> float:
    w = params.window
    if w > min(x.shape):
        raise ConfigurationError(f"SSIM window {w} larger than image {x.shape}")

    def box(a):
        return sliding_window_view(a, (w, w)).mean(axis=(-2, -1))

    mu_x, mu_y = box(x), box(y)
    var_x = box(x * x) - mu_x * mu_x
    var_y = box(y * y) - mu_y * mu_y
    cov = box(x * y) - mu_x * mu_y
    c1, c2 = params.c1, params.c2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


def ssim(x, y, params: SsimParams = SsimParams()) -> float:
    """Mean SSIM over every valid uniform window position.

    Accepts HxW or CxHxW images; channels are scored separately and averaged.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if x.ndim == 2:
        return _ssim_plane(x, y, params)
    if x.ndim != 3:
        raise DimensionError(f"ssim: expected HxW or CxHxW images, got {x.shape}")
    return float(np.mean([_ssim_plane(a, b, params) for a, b in zip(x, y)]))


def mean_ssim(xs, ys, params: SsimParams = SsimParams()) -> float:
    """Average SSIM over a batch of NxCxHxW images."""
    xs = np.asarray(getattr(xs, "data", xs))
    ys = np.asarray(getattr(ys, "data", ys))
    if xs.shape != ys.shape:
        raise DimensionError(f"mean_ssim: shapes {xs.shape} and {ys.shape} differ")
    return float(np.mean([ssim(a, b, params) for a, b in zip(xs, ys)]))
