"""Datasets: synthetic class-template images and an optional CIFAR-10 reader."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .rng import RngStream, as_stream


@dataclass
class Dataset:
    x: np.ndarray  # N x C x H x W, float32
    y: np.ndarray  # N, int64

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise ConfigurationError("image and label counts differ")

    def __len__(self) -> int:
        return self.y.shape[0]

    def subset(self, index) -> Dataset:
        return Dataset(self.x[index], self.y[index])

    def restrict(self, classes) -> Dataset:
        return self.subset(np.isin(self.y, list(classes)))

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield self.x[idx], self.y[idx]


def stratified_split(data: Dataset, fraction: float, rng: RngStream) -> tuple[Dataset, Dataset]:
    """Hold out ``fraction`` of every class; returns (remaining, held_out)."""
    held = []
    for cls in np.unique(data.y):
        idx = np.flatnonzero(data.y == cls)
        idx = idx[rng.fork(f"class{cls}").permutation(idx.size)]
        held.extend(idx[:int(round(fraction * idx.size))])
    mask = np.zeros(len(data), bool)
    mask[held] = True
    return data.subset(~mask), data.subset(mask)


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Class-template images with per-sample Gaussian noise.

    Every class template is a shared smooth base plus a class-specific smooth
    pattern of amplitude ``class_contrast``.  The optional user transform
    ``a * (template + noise) + b`` is applied before clipping to [0, 1].
    """

    num_classes: int = 8
    image_shape: tuple[int, int, int] = (1, 16, 16)
    sample_noise: float = 0.3
    class_contrast: float = 0.3
    train_per_class: int = 500
    test_per_class: int = 100
    user_subset: tuple[int, ...] | None = None
    user_scale: float = 1.0
    user_bias: float = 0.0

    def __post_init__(self):
        if self.user_subset is not None:
            subset = tuple(self.user_subset)
            if not subset or len(set(subset)) != len(subset) or not all(0 <= c < self.num_classes for c in subset):
                raise ConfigurationError(f"invalid user subset {subset} for {self.num_classes} classes")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes, "image_shape": list(self.image_shape),
            "sample_noise": self.sample_noise, "class_contrast": self.class_contrast,
            "train_per_class": self.train_per_class, "test_per_class": self.test_per_class,
            "user_subset": None if self.user_subset is None else list(self.user_subset),
            "user_scale": self.user_scale, "user_bias": self.user_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticDatasetSpec:
        d = dict(d)
        if "image_shape" in d:
            d["image_shape"] = tuple(d["image_shape"])
        if d.get("user_subset") is not None:
            d["user_subset"] = tuple(d["user_subset"])
        return cls(**d)


def _smooth_field(rng: RngStream, shape: tuple[int, int, int], coarse: int = 4) -> np.ndarray:
    """Bilinear upsampling of a coarse Gaussian grid, scaled to unit peak."""
    c, h, w = shape
    grid = rng.normal((c, coarse, coarse))
    ys = np.linspace(0, coarse - 1, h)
    xs = np.linspace(0, coarse - 1, w)
    y0 = np.minimum(np.floor(ys).astype(int), coarse - 2)
    x0 = np.minimum(np.floor(xs).astype(int), coarse - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    out = ((1 - fy) * (1 - fx) * grid[:, y0][:, :, x0] + (1 - fy) * fx * grid[:, y0][:, :, x0 + 1]
           + fy * (1 - fx) * grid[:, y0 + 1][:, :, x0] + fy * fx * grid[:, y0 + 1][:, :, x0 + 1])
    return out / np.abs(out).max()


def class_templates(spec: SyntheticDatasetSpec, rng: RngStream) -> np.ndarray:
    base = 0.5 + 0.2 * _smooth_field(rng.fork("base"), spec.image_shape)
    return np.stack([base + spec.class_contrast * _smooth_field(rng.fork(f"class{k}"), spec.image_shape)
                     for k in range(spec.num_classes)])


def _draw_split(spec: SyntheticDatasetSpec, templates: np.ndarray, rng: RngStream, per_class: int) -> Dataset:
    y = np.repeat(np.arange(spec.num_classes), per_class)
    noise = rng.normal((y.size,) + tuple(spec.image_shape), spec.sample_noise) if spec.sample_noise else 0.0
    x = np.clip(spec.user_scale * (templates[y] + noise) + spec.user_bias, 0.0, 1.0)
    data = Dataset(x, y)
    return data.restrict(spec.user_subset) if spec.user_subset is not None else data


def generate_synthetic(spec: SyntheticDatasetSpec, seed) -> tuple[Dataset, Dataset]:
    """Train and test sets; the user subset filter is applied after generation."""
    root = as_stream(seed)
    templates = class_templates(spec, root.fork("templates"))
    samples = root.fork("samples")
    return (_draw_split(spec, templates, samples.fork("train"), spec.train_per_class),
            _draw_split(spec, templates, samples.fork("test"), spec.test_per_class))


def generate_surrogate(spec: SyntheticDatasetSpec, seed, per_class: int) -> Dataset:
    """Fresh samples from the same class templates, disjoint from train/test draws."""
    root = as_stream(seed)
    templates = class_templates(spec, root.fork("templates"))
    return _draw_split(spec, templates, root.fork("attack").fork("surrogate"), per_class)


@dataclass
class Cifar10Reader:
    """Reader for the CIFAR-10 binary batches (1 label byte + 3072 RGB bytes per record)."""

    root: Path
    files: tuple[str, ...] = field(default=("data_batch_1.bin",))

    RECORD = 1 + 3 * 32 * 32

    def load(self, normalize: bool = True) -> Dataset:
        xs, ys = [], []
        for name in self.files:
            raw = np.fromfile(Path(self.root) / name, dtype=np.uint8)
            if raw.size % self.RECORD:
                raise ConfigurationError(f"{name}: size is not a multiple of {self.RECORD}-byte records")
            records = raw.reshape(-1, self.RECORD)
            ys.append(records[:, 0].astype(np.int64))
            xs.append(records[:, 1:].reshape(-1, 3, 32, 32))
        x = np.concatenate(xs).astype(np.float32)
        return Dataset(x / 255.0 if normalize else x, np.concatenate(ys))
