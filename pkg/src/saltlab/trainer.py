"""Split-learning adapter training, head baselines and evaluation.

Each training batch follows the client/server exchange: the client adapts
its head features, the server applies the forward channel, runs the frozen
tail and returns the loss gradient with respect to the received features,
and the client pushes that gradient (after the gradient channel) through
its own trainable part.  The server end is either in-process
(:class:`~saltlab.protocol.LocalServer`) or a network transport.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .channel import ChannelSpec, apply_channel
from .data import Dataset
from .errors import ClosedModelViolation, ConfigurationError, ContractError, SessionError
from .metrics import LatencyModel, comm_latency_per_batch, feature_size_bits, predict
from .protocol import TRAIN_PHASE, VALIDATE_PHASE, ClientSession, LocalServer, SessionConfig
from .rng import RngStream
from .split import Adapter, SplitModel, adapter_apply, forward_head, forward_tail

log = logging.getLogger(__name__)

MODES = ("salt_residual", "salt_insertion", "head_finetune", "head_retrain", "none")
FEATURE_CHUNK = 256


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 10
    min_delta: float = 1e-4
    forward_channel: ChannelSpec = field(default_factory=ChannelSpec.identity)
    gradient_channel: ChannelSpec = field(default_factory=ChannelSpec.identity)
    seed: int = 0
    mode: str = "salt_residual"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("batch_size, max_epochs and early_stop_patience must be >= 1")
        if self.min_delta < 0:
            raise ConfigurationError("min_delta must be non-negative")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["forward_channel"] = self.forward_channel.to_dict()
        d["gradient_channel"] = self.gradient_channel.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        for key in ("forward_channel", "gradient_channel"):
            if key in d:
                d[key] = ChannelSpec.from_dict(d[key])
        return cls(**d)


# --------------------------------------------------------------------------
# optimizer and early stopping
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[T.Parameter], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of every trainable parameter in ``params``."""
    trainable = [p for p in params if p.trainable]
    if any(p.grad is None for p in trainable):
        raise ContractError("adam_step called before gradients were computed")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p in trainable:
        key = id(p)
        g = p.grad
        m = state.m.setdefault(key, np.zeros_like(p.data))
        v = state.v.setdefault(key, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


class EarlyStopper:
    """Stops once ``patience`` consecutive epochs fail to improve by more than ``min_delta``."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = -1
        self.since_improvement = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch's validation loss; True means improvement."""
        if val_loss < self.best - self.min_delta:
            self.best, self.best_epoch, self.since_improvement = val_loss, epoch, 0
            return True
        self.since_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_improvement >= self.patience


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    wall_clock_s: float
    t_comm_s: float


@dataclass
class TrainReport:
    mode: str
    seed: int
    history: list[EpochRecord] = field(default_factory=list)
    epochs: int = 0
    best_epoch: int = 0
    stopped_early: bool = False
    train_samples: int = 0
    batch_size: int = 0
    feature_bits: int = 0
    head_digest: tuple[str, str] = ("", "")
    tail_digest: tuple[str, str] = ("", "")

    @property
    def latency_model(self) -> LatencyModel:
        return LatencyModel(self.feature_bits, self.batch_size, self.train_samples, max(self.epochs, 1))

    @property
    def t_comm_total_s(self) -> float:
        return float(sum(r.t_comm_s for r in self.history))

    @property
    def wall_clock_s(self) -> float:
        return float(sum(r.wall_clock_s for r in self.history))

    def csv_rows(self, timing: bool = True) -> list[dict]:
        return [{"seed": self.seed, "mode": self.mode, "epoch": r.epoch, "train_loss": r.train_loss,
                 "val_loss": r.val_loss, "val_acc": r.val_acc,
                 "wall_clock_s": r.wall_clock_s if timing else 0.0} for r in self.history]


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    correct: int
    total: int


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def head_features(model: SplitModel, x: np.ndarray) -> np.ndarray:
    """H(x) for a whole array, computed in fixed-size chunks."""
    out = [forward_head(model, x[i:i + FEATURE_CHUNK]).data for i in range(0, len(x), FEATURE_CHUNK)]
    return np.concatenate(out) if out else np.zeros((0,) + model.latent_shape, np.float32)


def with_head(model: SplitModel, head: nn.Network) -> SplitModel:
    if head.output_shape != model.latent_shape or head.input_shape != model.input_shape:
        raise ConfigurationError("replacement head does not match the split model's shapes")
    return dataclasses.replace(model, head=head)


def copy_network(net: nn.Network) -> nn.Network:
    clone = nn.build_network(net.specs, net.input_shape, 0, net.boundaries)
    clone.load_state(net.state())
    return clone


def evaluate(model: SplitModel, adapter: Adapter | None, dataset: Dataset,
             channel: ChannelSpec | None = None, seed: int = 0) -> EvalResult:
    """Forward-only pass H -> adapter -> channel -> T with per-batch channel draws."""
    channel = channel or ChannelSpec.identity()
    if adapter is not None:
        adapter.eval()
    stream = RngStream(seed).fork("eval")
    feats = head_features(model, dataset.x)
    correct, loss_sum = 0, 0.0
    with T.no_grad():
        for b, start in enumerate(range(0, len(dataset), FEATURE_CHUNK)):
            z = T.Tensor(feats[start:start + FEATURE_CHUNK])
            y = dataset.y[start:start + FEATURE_CHUNK]
            sent = adapter_apply(adapter, z) if adapter is not None else z
            received = apply_channel(channel, sent.data, stream.fork(b))
            logits = forward_tail(model, received)
            loss_sum += T.softmax_cross_entropy(logits, y).item() * len(y)
            correct += int(np.count_nonzero(predict(logits.data) == y))
    total = len(dataset)
    return EvalResult(correct / total if total else 0.0, loss_sum / total if total else 0.0, correct, total)


def evaluate_backbone(backbone: nn.Network, dataset: Dataset) -> EvalResult:
    backbone.eval()
    correct, loss_sum = 0, 0.0
    with T.no_grad():
        for start in range(0, len(dataset), FEATURE_CHUNK):
            y = dataset.y[start:start + FEATURE_CHUNK]
            logits = backbone(dataset.x[start:start + FEATURE_CHUNK])
            loss_sum += T.softmax_cross_entropy(logits, y).item() * len(y)
            correct += int(np.count_nonzero(predict(logits.data) == y))
    return EvalResult(correct / len(dataset), loss_sum / len(dataset), correct, len(dataset))


# --------------------------------------------------------------------------
# the split-learning loop
# --------------------------------------------------------------------------

BatchHook = Callable[[int, int], None]


def _open_server(model: SplitModel, cfg: TrainConfig, engine):
    config = SessionConfig(model.split_point, model.latent_shape, cfg.batch_size, cfg.seed, cfg.forward_channel)
    if engine is None or engine == "local":
        return LocalServer(model, config)
    if hasattr(engine, "send") and hasattr(engine, "recv"):
        return ClientSession(engine, config)
    raise ConfigurationError(f"unknown engine {engine!r}")


def _split_learning(model: SplitModel, client_forward, client_net: nn.Network, train_set: Dataset,
                    val_set: Dataset, cfg: TrainConfig, engine, on_batch: BatchHook | None,
                    report: TrainReport) -> None:
    """Shared epoch loop; ``client_forward(x, idx)`` returns the tensor sent to the server."""
    server = _open_server(model, cfg, engine)
    root = RngStream(cfg.seed)
    adam = AdamState()
    per_batch = comm_latency_per_batch(LatencyModel(report.feature_bits, cfg.batch_size))
    stopper = EarlyStopper(cfg.early_stop_patience, cfg.min_delta)
    best_state = client_net.state()

    def validate(epoch: int) -> tuple[float, float]:
        client_net.eval()
        server.begin_phase(epoch, VALIDATE_PHASE)
        loss_sum, correct = 0.0, 0
        with T.no_grad():
            for start in range(0, len(val_set), FEATURE_CHUNK):
                idx = np.arange(start, min(start + FEATURE_CHUNK, len(val_set)))
                _, m = server.exchange(client_forward(val_set, idx), val_set.y[idx])
                loss_sum += m.loss * m.total
                correct += m.correct
        return loss_sum / len(val_set), correct / len(val_set)

    try:
        started = time.perf_counter()
        val_loss, val_acc = validate(0)
        report.history.append(EpochRecord(0, float("nan"), val_loss, val_acc, time.perf_counter() - started, 0.0))
        stopper.update(0, val_loss)
        for epoch in range(1, cfg.max_epochs + 1):
            started = time.perf_counter()
            client_net.train()
            server.begin_phase(epoch, TRAIN_PHASE)
            order = root.fork("shuffle").fork(epoch).permutation(len(train_set))
            loss_sum, n_batches = 0.0, 0
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                buffers = [b.copy() for b in client_net.buffers()]
                try:
                    sent = client_forward(train_set, idx)
                    delta, m = server.exchange(sent, train_set.y[idx])
                except SessionError:
                    # keep the client at its last completed batch
                    for live, saved in zip(client_net.buffers(), buffers):
                        live[...] = saved
                    raise
                grad_rng = root.fork("gradient_channel").fork(epoch).fork(b)
                delta = apply_channel(cfg.gradient_channel, delta, grad_rng)
                client_net.zero_grad()
                T.tensor_sum(T.mul(sent, T.Tensor(delta))).backward()
                adam_step(client_net.parameters(), adam, cfg.learning_rate)
                loss_sum += m.loss * m.total
                n_batches += 1
                if on_batch is not None:
                    on_batch(epoch, b)
            val_loss, val_acc = validate(epoch)
            report.history.append(EpochRecord(epoch, loss_sum / len(train_set), val_loss, val_acc,
                                              time.perf_counter() - started, n_batches * per_batch))
            report.epochs = epoch
            if stopper.update(epoch, val_loss):
                best_state = client_net.state()
            if stopper.should_stop:
                report.stopped_early = True
                break
    finally:
        server.close()
    report.best_epoch = max(stopper.best_epoch, 0)
    client_net.load_state(best_state)
    client_net.eval()


def train_adapter(model: SplitModel, adapter: Adapter, train_set: Dataset, val_set: Dataset,
                  cfg: TrainConfig, engine=None, on_batch: BatchHook | None = None) -> tuple[Adapter, TrainReport]:
    """Train only ``adapter`` between the frozen head and tail.

    ``engine`` is ``None``/``"local"`` for the in-process server or a
    transport connected to a split server.  Head and tail digests are
    compared before and after; any change raises ClosedModelViolation.
    The adapter is returned at its best-validation epoch.
    """
    if adapter.latent_shape != model.latent_shape:
        raise ConfigurationError(f"adapter shape {adapter.latent_shape} != latent {model.latent_shape}")
    before = model.digests()
    report = TrainReport(cfg.mode, cfg.seed, train_samples=len(train_set), batch_size=cfg.batch_size,
                         feature_bits=feature_size_bits(model.latent_shape))
    train_feats = head_features(model, train_set.x)
    val_feats = head_features(model, val_set.x)

    def client_forward(data: Dataset, idx):
        feats = train_feats if data is train_set else val_feats
        return adapter_apply(adapter, T.Tensor(feats[idx]))

    _split_learning(model, client_forward, adapter.network, train_set, val_set, cfg, engine, on_batch, report)
    after = model.digests()
    report.head_digest = (before[0], after[0])
    report.tail_digest = (before[1], after[1])
    if before != after:
        raise ClosedModelViolation(f"frozen parameters changed during adapter training: "
                                   f"head {before[0]} -> {after[0]}, tail {before[1]} -> {after[1]}")
    return adapter, report


def train_baseline(model: SplitModel, which: str, train_set: Dataset, val_set: Dataset,
                   cfg: TrainConfig, on_batch: BatchHook | None = None) -> tuple[nn.Network, TrainReport]:
    """Closed-model-violating baselines that train a copy of the head.

    ``head_finetune`` starts from the pretrained head, ``head_retrain`` from a
    fresh initialization seeded by ``cfg.seed``.  The tail stays frozen.
    """
    if which not in ("head_finetune", "head_retrain"):
        raise ConfigurationError(f"unknown baseline {which!r}")
    if which == "head_finetune":
        head = copy_network(model.head)
    else:
        head = nn.build_network(model.head.specs, model.input_shape, RngStream(cfg.seed).fork("retrain"))
    head.unfreeze()
    tail_before = nn.param_digest(model.tail)
    report = TrainReport(which, cfg.seed, train_samples=len(train_set), batch_size=cfg.batch_size,
                         feature_bits=feature_size_bits(model.latent_shape))
    report.head_digest = (nn.param_digest(model.head), "")

    def client_forward(data: Dataset, idx):
        return head(T.Tensor(data.x[idx]))

    _split_learning(model, client_forward, head, train_set, val_set, dataclasses.replace(cfg, mode=which),
                    None, on_batch, report)
    report.head_digest = (report.head_digest[0], nn.param_digest(head))
    tail_after = nn.param_digest(model.tail)
    report.tail_digest = (tail_before, tail_after)
    if tail_before != tail_after:
        raise ClosedModelViolation("tail parameters changed during a head baseline")
    head.freeze().eval()
    return head, report
