"""Feature/gradient channel operators: identity, packet loss, Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .rng import RngStream

__all__ = ["ChannelSpec", "RngStream", "apply_channel", "apply_channel_differentiable", "sample_mask"]

KINDS = ("identity", "packet_loss", "gaussian_noise", "compose")


@dataclass(frozen=True)
class ChannelSpec:
    kind: str = "identity"
    p: float = 0.0
    sigma: float = 0.0
    members: tuple[ChannelSpec, ...] = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown channel kind {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"packet loss rate {self.p} outside [0, 1]")
        if self.sigma < 0:
            raise ConfigurationError(f"noise sigma {self.sigma} is negative")
        if self.kind == "compose" and not self.members:
            raise ConfigurationError("compose channel needs at least one member")

    @classmethod
    def identity(cls) -> ChannelSpec:
        return cls("identity")

    @classmethod
    def packet_loss(cls, p: float) -> ChannelSpec:
        return cls("packet_loss", p=float(p))

    @classmethod
    def gaussian_noise(cls, sigma: float) -> ChannelSpec:
        return cls("gaussian_noise", sigma=float(sigma))

    @classmethod
    def compose(cls, *members: ChannelSpec) -> ChannelSpec:
        return cls("compose", members=tuple(members))

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "packet_loss":
            out["p"] = self.p
        elif self.kind == "gaussian_noise":
            out["sigma"] = self.sigma
        elif self.kind == "compose":
            out["members"] = [m.to_dict() for m in self.members]
        return out

    @classmethod
    def from_dict(cls, d: dict | None) -> ChannelSpec:
        if not d:
            return cls.identity()
        kind = d.get("kind", "identity")
        if kind == "compose":
            return cls.compose(*(cls.from_dict(m) for m in d.get("members", [])))
        return cls(kind, p=float(d.get("p", 0.0)), sigma=float(d.get("sigma", 0.0)))

    def describe(self) -> str:
        if self.kind == "packet_loss":
            return f"packet_loss(p={self.p:g})"
        if self.kind == "gaussian_noise":
            return f"gaussian_noise(sigma={self.sigma:g})"
        if self.kind == "compose":
            return " -> ".join(m.describe() for m in self.members)
        return "identity"


def sample_mask(p: float, shape, rng: RngStream, dtype=np.float32) -> np.ndarray:
    """i.i.d. Bernoulli(1 - p) keep-mask of 0/1 values."""
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"packet loss rate {p} outside [0, 1]")
    return (rng.random(shape) >= p).astype(dtype)


def _draws(spec: ChannelSpec, shape, dtype, rng: RngStream) -> list[tuple[str, np.ndarray | None]]:
    """Realize every random quantity of ``spec`` in application order."""
    if spec.kind == "compose":
        return [d for m in spec.members for d in _draws(m, shape, dtype, rng)]
    if spec.kind == "packet_loss":
        if spec.p == 0.0:
            return [("identity", None)]
        return [("mask", sample_mask(spec.p, shape, rng, dtype) != 0)]
    if spec.kind == "gaussian_noise":
        if spec.sigma == 0.0:
            return [("identity", None)]
        return [("noise", rng.normal(shape, spec.sigma).astype(dtype))]
    return [("identity", None)]


def apply_channel(spec: ChannelSpec, t, rng: RngStream):
    """Apply ``spec`` to an array or tensor without recording a graph.

    Dropped elements are zero-filled.  p = 0 and sigma = 0 return the input
    unchanged.
    """
    data = t.data if isinstance(t, T.Tensor) else np.asarray(t)
    out = data
    for kind, draw in _draws(spec, data.shape, data.dtype, rng):
        if kind == "mask":
            out = np.where(draw, out, out.dtype.type(0))
        elif kind == "noise":
            out = out + draw
    return T.Tensor(out) if isinstance(t, T.Tensor) else out


def apply_channel_differentiable(spec: ChannelSpec, t, rng: RngStream) -> T.Tensor:
    """Graph-recording variant of :func:`apply_channel` with identical forward values.

    Backward multiplies by the sampled mask and passes noise through unchanged.
    """
    t = T.as_tensor(t)
    out = t
    for kind, draw in _draws(spec, t.shape, t.dtype, rng):
        if kind == "mask":
            out = T.masked(out, draw)
        elif kind == "noise":
            out = T.add(out, T.Tensor(draw))
    return out

