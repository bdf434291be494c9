"""Frozen-backbone split learning with trainable feature adapters, on numpy."""

from .channel import ChannelSpec, apply_channel, apply_channel_differentiable
from .data import Dataset, SyntheticDatasetSpec, generate_synthetic
from .errors import (ClosedModelViolation, ConfigurationError, ConstructionError, ContractError,
                     DegenerateBatchError, DimensionError, FramingError, LabelError, ProtocolError, SaltError,
                     SessionError)
from .harness import ExperimentConfig, emit_csv, pretrain_backbone, run_scenario
from .inversion import AttackConfig, evaluate_attack, train_inverter
from .metrics import LatencyModel, SsimParams, comm_latency_per_batch, ssim, total_comm_latency
from .nn import Network, param_digest
from .rng import RngStream
from .split import Adapter, SplitModel, build_desk_backbone, split_at
from .tensor import Parameter, Tensor, no_grad
from .trainer import TrainConfig, evaluate, train_adapter, train_baseline

__version__ = "0.1.0"

__all__ = [
    "Adapter", "AttackConfig", "ChannelSpec", "ClosedModelViolation", "ConfigurationError", "ConstructionError",
    "ContractError", "Dataset", "DegenerateBatchError", "DimensionError", "ExperimentConfig", "FramingError",
    "LabelError", "LatencyModel", "Network", "Parameter", "ProtocolError", "RngStream", "SaltError",
    "SessionError", "SplitModel", "SsimParams", "SyntheticDatasetSpec", "Tensor", "TrainConfig", "apply_channel",
    "apply_channel_differentiable", "build_desk_backbone", "comm_latency_per_batch", "emit_csv", "evaluate",
    "evaluate_attack", "generate_synthetic", "no_grad", "param_digest", "pretrain_backbone", "run_scenario",
    "split_at", "ssim", "total_comm_latency", "train_adapter", "train_baseline", "train_inverter",
]
