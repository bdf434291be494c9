"""Model-inversion attacker: a decoder from transmitted features back to images.

The decoder is trained on clean head features of a surrogate dataset and
then scored on noise-perturbed features.  It never sees adapter parameters;
for the with-adapter condition it only receives the transmitted tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .channel import ChannelSpec, apply_channel
from .data import Dataset
from .errors import ClosedModelViolation, ConfigurationError, ConstructionError
from .metrics import SsimParams, ssim
from .nn import LayerSpec, Network
from .rng import RngStream, as_stream
from .split import Adapter, SplitModel, adapter_apply
from .trainer import FEATURE_CHUNK, AdamState, adam_step, head_features

DEFAULT_ATTACK_SIGMAS = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5)
CONDITIONS = ("without_salt", "with_salt")


def decoder_specs(latent_shape, image_shape) -> list[LayerSpec]:
    """conv3x3 + ReLU + 2x upsampling until the image side is reached, then conv3x3 to image channels."""
    c, h, _ = latent_shape
    target = image_shape[1]
    specs: list[LayerSpec] = []
    while h < target:
        specs += [nn.conv(c), nn.relu(), nn.upsample(2)]
        h *= 2
    return specs + [nn.conv(image_shape[0])]


@dataclass
class AttackConfig:
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 32
    surrogate_per_class: int = 250
    eval_samples: int = 400
    sigmas: tuple[float, ...] = DEFAULT_ATTACK_SIGMAS
    decoder: list[LayerSpec] | None = None  # None: derived from the shapes

    def __post_init__(self):
        self.sigmas = tuple(float(s) for s in self.sigmas)
        if any(s < 0 for s in self.sigmas):
            raise ConfigurationError("attack sigma values must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.surrogate_per_class < 1 or self.eval_samples < 1:
            raise ConfigurationError("attack epochs, batch size and sample counts must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("attack learning rate must be positive")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "learning_rate": self.learning_rate, "batch_size": self.batch_size,
                "surrogate_per_class": self.surrogate_per_class, "eval_samples": self.eval_samples,
                "sigmas": list(self.sigmas)}

    @classmethod
    def from_dict(cls, d: dict) -> AttackConfig:
        d = dict(d)
        d.pop("decoder", None)
        if "sigmas" in d:
            d["sigmas"] = tuple(d["sigmas"])
        return cls(**d)


def build_decoder(latent_shape, image_shape, seed, specs: list[LayerSpec] | None = None) -> Network:
    latent_shape, image_shape = tuple(latent_shape), tuple(image_shape)
    specs = decoder_specs(latent_shape, image_shape) if specs is None else specs
    decoder = nn.build_network(specs, latent_shape, as_stream(seed, "init"))
    if decoder.output_shape != image_shape:
        raise ConstructionError(f"decoder maps {latent_shape} to {decoder.output_shape}, images are {image_shape}")
    return decoder.unfreeze().train()


def train_inverter(model: SplitModel, surrogate: Dataset, cfg: AttackConfig, seed) -> Network:
    """Fit a decoder to (H(x), x) pairs with mean-squared error; the head is never touched."""
    rng = as_stream(seed, "attack")
    before = nn.param_digest(model.head)
    feats = head_features(model, surrogate.x)
    decoder = build_decoder(model.latent_shape, model.input_shape, rng.fork("decoder"), cfg.decoder)
    adam = AdamState()
    for epoch in range(cfg.epochs):
        order = rng.fork("shuffle").fork(epoch).permutation(len(surrogate))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            decoder.zero_grad()
            T.mse_loss(decoder(T.Tensor(feats[idx])), surrogate.x[idx]).backward()
            adam_step(decoder.parameters(), adam, cfg.learning_rate)
    if nn.param_digest(model.head) != before:
        raise ClosedModelViolation("head parameters changed during attack training")
    return decoder.freeze().eval()


def reconstruct(decoder: Network, features: np.ndarray) -> np.ndarray:
    with T.no_grad():
        out = [decoder(T.Tensor(features[i:i + FEATURE_CHUNK])).data for i in range(0, len(features), FEATURE_CHUNK)]
    return np.concatenate(out)


def transmitted_features(model: SplitModel, adapter: Adapter | None, x: np.ndarray) -> np.ndarray:
    """What the client puts on the wire: H(x), or the adapter output when present."""
    feats = head_features(model, x)
    if adapter is None:
        return feats
    adapter.eval()
    with T.no_grad():
        return np.concatenate([adapter_apply(adapter, feats[i:i + FEATURE_CHUNK]).data
                               for i in range(0, len(feats), FEATURE_CHUNK)])


@dataclass
class AttackResult:
    sigma: float
    mean_ssim: float
    mean_mse: float


def noise_stream(seed, sigma: float) -> RngStream:
    """Noise draws shared by both conditions at a given sigma, so they are paired."""
    return as_stream(seed, "attack").fork("noise").fork(f"{sigma:g}")


def evaluate_attack(decoder: Network, model: SplitModel, adapter: Adapter | None, test: Dataset,
                    sigmas, seed, params: SsimParams = SsimParams()) -> list[AttackResult]:
    """Mean SSIM and MSE of reconstructions from Gaussian-perturbed transmitted features, per sigma."""
    sigmas = [float(s) for s in sigmas]
    if any(s < 0 or not math.isfinite(s) for s in sigmas):
        raise ConfigurationError("attack sigma values must be finite and non-negative")
    feats = transmitted_features(model, adapter, test.x)
    results = []
    for sigma in sigmas:
        noisy = apply_channel(ChannelSpec.gaussian_noise(sigma), feats, noise_stream(seed, sigma))
        recon = reconstruct(decoder, noisy).astype(np.float64)
        scores = [ssim(r, x, params) for r, x in zip(recon, test.x)]
        mse = float(np.mean((recon - test.x) ** 2))
        results.append(AttackResult(sigma, float(np.mean(scores)), mse))
    return results


@dataclass
class AttackRecord:
    """One row of the attack CSV."""

    seed: int
    sigma: float
    condition: str
    mean_ssim: float
    mean_mse: float

    def row(self) -> dict:
        return {"seed": self.seed, "sigma": self.sigma, "condition": self.condition,
                "mean_ssim": self.mean_ssim, "mean_mse": self.mean_mse}


ATTACK_COLUMNS = ("seed", "sigma", "condition", "mean_ssim", "mean_mse")

__all__ = ["ATTACK_COLUMNS", "AttackConfig", "AttackRecord", "AttackResult", "CONDITIONS", "build_decoder",
           "decoder_specs", "evaluate_attack", "noise_stream", "reconstruct", "train_inverter",
           "transmitted_features"]
