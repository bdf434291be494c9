"""Experiment orchestration: pretraining, scenario runners and CSV output.

Every scenario reads a pretrained backbone file, builds the user dataset
(class subset plus an affine tint), and writes deterministic CSVs.  Grid
points are independent jobs; they run sequentially by default or on a
thread pool when ``workers > 1``, and results are assembled in a fixed order.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .channel import ChannelSpec
from .data import Dataset, SyntheticDatasetSpec, generate_surrogate, generate_synthetic, stratified_split
from .errors import ConfigurationError
from .inversion import AttackConfig, evaluate_attack, train_inverter
from .metrics import LatencyModel, comm_latency_per_batch, feature_size_bits, total_comm_latency
from .modelfile import load_network, save_network
from .rng import RngStream
from .split import DEFAULT_SPLIT_POINT, DESK_SPLIT_POINTS, Adapter, SplitModel, build_desk_backbone, split_at
from .trainer import (AdamState, EarlyStopper, TrainConfig, TrainReport, adam_step, evaluate, evaluate_backbone,
                      train_adapter, train_baseline, with_head)

log = logging.getLogger(__name__)

SCENARIOS = ("user_adapt", "packet_loss_sweep", "noise_privacy_sweep", "split_point_sweep")
DEFAULT_LOSS_RATES = (0.0, 0.25, 0.5, 0.75)
DEFAULT_SIGMAS = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5)
USER_ADAPT_MODES = ("none", "salt_residual", "salt_insertion", "head_finetune", "head_retrain")
SWEEP_MODES = ("none", "salt_residual")
VALIDATION_FRACTION = 0.1

RESULT_COLUMNS = ("scenario", "seed", "split_point", "loss_rate", "sigma", "mode", "condition", "accuracy",
                  "loss", "ssim", "mse", "epochs", "best_epoch", "t_comm_batch_s", "t_comm_total_s",
                  "comp_latency_s")
TRAIN_LOG_COLUMNS = ("split_point", "loss_rate", "sigma", "seed", "mode", "epoch", "train_loss", "val_loss",
                     "val_acc", "wall_clock_s")
CROSS_EVAL_COLUMNS = ("seed", "train_loss_rate", "eval_loss_rate", "mode", "accuracy")
ATTACK_COLUMNS = ("seed", "sigma", "condition", "mean_ssim", "mean_mse")


def desk_user_spec() -> SyntheticDatasetSpec:
    """Four of eight classes with a mild brightness/contrast tint."""
    return SyntheticDatasetSpec(user_subset=(0, 1, 2, 3), user_scale=1.1, user_bias=0.05)


def full_task_spec(spec: SyntheticDatasetSpec) -> SyntheticDatasetSpec:
    """The pretraining distribution: every class, no user transform."""
    return dataclasses.replace(spec, user_subset=None, user_scale=1.0, user_bias=0.0)


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 30
    early_stop_patience: int = 4
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.learning_rate <= 0 or min(self.batch_size, self.max_epochs, self.early_stop_patience) < 1:
            raise ConfigurationError("invalid pretraining settings")


@dataclass
class ExperimentConfig:
    scenario: str = "user_adapt"
    dataset: SyntheticDatasetSpec = field(default_factory=desk_user_spec)
    data_seed: int = 0
    split_point: str = DEFAULT_SPLIT_POINT
    split_points: tuple[str, ...] = DESK_SPLIT_POINTS
    train: TrainConfig = field(default_factory=TrainConfig)
    modes: tuple[str, ...] | None = None  # None: the scenario's default mode list
    loss_rates: tuple[float, ...] = DEFAULT_LOSS_RATES
    sigmas: tuple[float, ...] = DEFAULT_SIGMAS
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "results"
    backbone_path: str = "backbone.smdl"
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    record_timing: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        self.split_points = tuple(self.split_points)
        self.loss_rates = tuple(float(p) for p in self.loss_rates)
        self.sigmas = tuple(float(s) for s in self.sigmas)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.modes is not None:
            self.modes = tuple(self.modes)
            bad = [m for m in self.modes if m not in USER_ADAPT_MODES]
            if bad:
                raise ConfigurationError(f"unknown modes {bad}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if any(not 0.0 <= p <= 1.0 for p in self.loss_rates):
            raise ConfigurationError("loss rates must lie in [0, 1]")
        if any(s < 0 for s in self.sigmas):
            raise ConfigurationError("sigma values must be non-negative")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")

    @property
    def scenario_modes(self) -> tuple[str, ...]:
        if self.modes is not None:
            return self.modes
        return USER_ADAPT_MODES if self.scenario == "user_adapt" else SWEEP_MODES

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario, "dataset": self.dataset.to_dict(), "data_seed": self.data_seed,
            "split_point": self.split_point, "split_points": list(self.split_points),
            "train": self.train.to_dict(), "modes": None if self.modes is None else list(self.modes),
            "loss_rates": list(self.loss_rates), "sigmas": list(self.sigmas), "seeds": list(self.seeds),
            "output_dir": self.output_dir, "backbone_path": self.backbone_path,
            "pretrain": dataclasses.asdict(self.pretrain), "attack": self.attack.to_dict(),
            "record_timing": self.record_timing, "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        if "dataset" in d:
            d["dataset"] = SyntheticDatasetSpec.from_dict(d["dataset"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "pretrain" in d:
            d["pretrain"] = PretrainConfig(**d["pretrain"])
        if "attack" in d:
            d["attack"] = AttackConfig.from_dict(d["attack"])
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc


# --------------------------------------------------------------------------
# CSV output
# --------------------------------------------------------------------------

def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return f"{value:.6g}"
    return str(value)


def emit_csv(rows, path, columns=None) -> Path:
    """Write ``rows`` (dicts) with a header; floats use 6 significant digits."""
    rows = list(rows)
    if columns is None:
        if not rows:
            raise ConfigurationError("columns are required for an empty row set")
        columns = list(rows[0])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format(row.get(c)) for c in columns])
    return path


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------

@dataclass
class PretrainResult:
    path: Path
    test_accuracy: float
    epochs: int
    best_epoch: int
    digest: str


def train_backbone(backbone: nn.Network, train: Dataset, val: Dataset, cfg: PretrainConfig, seed) -> tuple[int, int]:
    """Full-network supervised training with early stopping; keeps the best-validation state."""
    root = RngStream(int(seed)).fork("pretrain")
    adam = AdamState()
    stopper = EarlyStopper(cfg.early_stop_patience, cfg.min_delta)
    best = backbone.state()
    epochs = 0
    for epoch in range(1, cfg.max_epochs + 1):
        backbone.train()
        order = root.fork("shuffle").fork(epoch).permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need two samples
            backbone.zero_grad()
            T.softmax_cross_entropy(backbone(train.x[idx]), train.y[idx]).backward()
            adam_step(backbone.parameters(), adam, cfg.learning_rate)
        epochs = epoch
        val_loss = evaluate_backbone(backbone, val).loss
        log.info("pretrain epoch %d: val loss %.4f", epoch, val_loss)
        if stopper.update(epoch, val_loss):
            best = backbone.state()
        if stopper.should_stop:
            break
    backbone.load_state(best)
    backbone.eval()
    return epochs, stopper.best_epoch


def pretrain_backbone(spec: SyntheticDatasetSpec, seed: int, path, cfg: PretrainConfig = PretrainConfig()) -> PretrainResult:
    """Train the desk backbone on every class of the untinted task and save it."""
    task = full_task_spec(spec)
    train, test = generate_synthetic(task, seed)
    fit, val = stratified_split(train, VALIDATION_FRACTION, RngStream(seed).fork("validation"))
    backbone = build_desk_backbone(seed, task.num_classes)
    epochs, best_epoch = train_backbone(backbone, fit, val, cfg, seed)
    save_network(backbone, path)
    acc = evaluate_backbone(backbone, test).accuracy
    return PretrainResult(Path(path), acc, epochs, best_epoch, nn.param_digest(backbone))


def load_backbone(path) -> nn.Network:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"backbone file {path} does not exist; run the pretrain step first")
    return load_network(path).freeze().eval()


# --------------------------------------------------------------------------
# scenario jobs
# --------------------------------------------------------------------------

EngineFactory = Callable[[], object]


@dataclass
class UserData:
    train: Dataset
    val: Dataset
    test: Dataset


def user_data(cfg: ExperimentConfig) -> UserData:
    train, test = generate_synthetic(cfg.dataset, cfg.data_seed)
    fit, val = stratified_split(train, VALIDATION_FRACTION, RngStream(cfg.data_seed).fork("validation"))
    return UserData(fit, val, test)


@dataclass
class ModeOutcome:
    mode: str
    accuracy: float
    loss: float
    report: TrainReport | None
    adapter: Adapter | None = None


def _t_comm(model: SplitModel, report: TrainReport | None, batch_size: int) -> tuple[float, float]:
    per_batch = comm_latency_per_batch(LatencyModel(feature_size_bits(model.latent_shape), batch_size))
    if report is None or report.epochs == 0:
        return per_batch, 0.0
    return per_batch, total_comm_latency(report.latency_model)


def run_mode(model: SplitModel, mode: str, data: UserData, train_cfg: TrainConfig, seed: int,
             eval_channel: ChannelSpec, engine_factory: EngineFactory | None = None) -> ModeOutcome:
    """Train one adaptation mode and evaluate it on the test set under ``eval_channel``."""
    cfg = dataclasses.replace(train_cfg, seed=seed, mode=mode)
    if mode == "none":
        res = evaluate(model, None, data.test, eval_channel, seed)
        return ModeOutcome(mode, res.accuracy, res.loss, None)
    if mode.startswith("salt_"):
        adapter = Adapter(model.latent_shape, mode.removeprefix("salt_"), RngStream(seed).fork("adapter"))
        engine = engine_factory() if engine_factory is not None else None
        adapter, report = train_adapter(model, adapter, data.train, data.val, cfg, engine)
        res = evaluate(model, adapter, data.test, eval_channel, seed)
        return ModeOutcome(mode, res.accuracy, res.loss, report, adapter)
    head, report = train_baseline(model, mode, data.train, data.val, cfg)
    res = evaluate(with_head(model, head), None, data.test, eval_channel, seed)
    return ModeOutcome(mode, res.accuracy, res.loss, report)


def _result_row(cfg: ExperimentConfig, model: SplitModel, out: ModeOutcome, seed: int, *,
                loss_rate=None, sigma=None, condition=None) -> dict:
    per_batch, total = _t_comm(model, out.report, cfg.train.batch_size)
    report = out.report
    return {"scenario": cfg.scenario, "seed": seed, "split_point": model.split_point, "loss_rate": loss_rate,
            "sigma": sigma, "mode": out.mode, "condition": condition, "accuracy": out.accuracy,
            "loss": out.loss, "epochs": 0 if report is None else report.epochs,
            "best_epoch": 0 if report is None else report.best_epoch,
            "t_comm_batch_s": per_batch, "t_comm_total_s": total,
            "comp_latency_s": report.wall_clock_s if report is not None and cfg.record_timing else 0.0}


def _log_rows(cfg: ExperimentConfig, model: SplitModel, out: ModeOutcome, *, loss_rate=None, sigma=None) -> list[dict]:
    if out.report is None:
        return []
    return [dict(row, split_point=model.split_point, loss_rate=loss_rate, sigma=sigma)
            for row in out.report.csv_rows(cfg.record_timing)]


def _run_jobs(cfg: ExperimentConfig, jobs: list[Callable[[], object]]) -> list:
    if cfg.workers == 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(lambda job: job(), jobs))


@dataclass
class ScenarioOutput:
    results: list[dict] = field(default_factory=list)
    train_log: list[dict] = field(default_factory=list)
    cross_eval: list[dict] = field(default_factory=list)
    attack: list[dict] = field(default_factory=list)


def _user_adapt(cfg: ExperimentConfig, backbone: nn.Network, data: UserData, engine_factory,
                split_points) -> ScenarioOutput:
    models = {sp: split_at(backbone, sp) for sp in split_points}
    keys = [(seed, sp, mode) for seed in cfg.seeds for sp in split_points for mode in cfg.scenario_modes]

    def job(seed, sp, mode):
        return lambda: run_mode(models[sp], mode, data, cfg.train, seed, ChannelSpec.identity(), engine_factory)

    outcomes = _run_jobs(cfg, [job(*k) for k in keys])
    out = ScenarioOutput()
    for (seed, sp, _), res in zip(keys, outcomes):
        out.results.append(_result_row(cfg, models[sp], res, seed))
        out.train_log += _log_rows(cfg, models[sp], res)
    return out


def _loss_sweep(cfg: ExperimentConfig, backbone: nn.Network, data: UserData, engine_factory) -> ScenarioOutput:
    model = split_at(backbone, cfg.split_point)
    keys = [(seed, p, mode) for seed in cfg.seeds for p in cfg.loss_rates for mode in cfg.scenario_modes]

    def job(seed, p, mode):
        train_cfg = dataclasses.replace(cfg.train, forward_channel=ChannelSpec.packet_loss(p))
        return lambda: run_mode(model, mode, data, train_cfg, seed, ChannelSpec.packet_loss(p), engine_factory)

    outcomes = _run_jobs(cfg, [job(*k) for k in keys])
    out = ScenarioOutput()
    for (seed, p, mode), res in zip(keys, outcomes):
        out.results.append(_result_row(cfg, model, res, seed, loss_rate=p))
        out.train_log += _log_rows(cfg, model, res, loss_rate=p)
        if res.adapter is None and mode != "none":
            continue
        # every adapter (and the unadapted model) is also scored across the whole loss grid
        for q in cfg.loss_rates:
            acc = res.accuracy if q == p else evaluate(model, res.adapter, data.test,
                                                       ChannelSpec.packet_loss(q), seed).accuracy
            out.cross_eval.append({"seed": seed, "train_loss_rate": p, "eval_loss_rate": q,
                                   "mode": mode, "accuracy": acc})
    return out


def _noise_sweep(cfg: ExperimentConfig, backbone: nn.Network, data: UserData, engine_factory) -> ScenarioOutput:
    model = split_at(backbone, cfg.split_point)
    keys = [(seed, s, mode) for seed in cfg.seeds for s in cfg.sigmas for mode in cfg.scenario_modes]

    def job(seed, s, mode):
        train_cfg = dataclasses.replace(cfg.train, forward_channel=ChannelSpec.gaussian_noise(s))
        return lambda: run_mode(model, mode, data, train_cfg, seed, ChannelSpec.gaussian_noise(s), engine_factory)

    outcomes = dict(zip(keys, _run_jobs(cfg, [job(*k) for k in keys])))
    attack_test = data.test.subset(np.arange(min(cfg.attack.eval_samples, len(data.test))))
    surrogate = generate_surrogate(cfg.dataset, cfg.data_seed, cfg.attack.surrogate_per_class)

    def attack_job(seed):
        decoder = train_inverter(model, surrogate, cfg.attack, seed)
        scores = {}
        for s in cfg.sigmas:
            for mode in cfg.scenario_modes:
                adapter = outcomes[(seed, s, mode)].adapter
                if mode == "none" or adapter is not None:
                    scores[(s, mode)] = evaluate_attack(decoder, model, adapter, attack_test, [s], seed)[0]
        return scores

    attacks = dict(zip(cfg.seeds, _run_jobs(cfg, [lambda seed=seed: attack_job(seed) for seed in cfg.seeds])))
    out = ScenarioOutput()
    for seed, s, mode in keys:
        res = outcomes[(seed, s, mode)]
        score = attacks[seed].get((s, mode))
        condition = _condition(mode)
        row = _result_row(cfg, model, res, seed, sigma=s, condition=condition)
        if score is not None:
            row.update(ssim=score.mean_ssim, mse=score.mean_mse)
            out.attack.append({"seed": seed, "sigma": s, "condition": condition,
                               "mean_ssim": score.mean_ssim, "mean_mse": score.mean_mse})
        out.results.append(row)
        out.train_log += _log_rows(cfg, model, res, sigma=s)
    return out


def _condition(mode: str) -> str:
    return "without_salt" if mode == "none" else ("with_salt" if mode.startswith("salt_") else mode)


def run_scenario(cfg: ExperimentConfig, engine_factory: EngineFactory | None = None,
                 output_dir=None) -> dict[str, Path]:
    """Run ``cfg.scenario`` and write its CSVs; returns {name: path}.

    ``engine_factory`` returns a fresh connected transport per adapter
    training run (networked mode); baselines always train in-process.
    """
    backbone = load_backbone(cfg.backbone_path)
    for sp in (cfg.split_points if cfg.scenario == "split_point_sweep" else (cfg.split_point,)):
        if sp not in backbone.boundaries:
            raise ConfigurationError(f"backbone has no split point {sp!r}")
    data = user_data(cfg)
    if cfg.scenario == "user_adapt":
        out = _user_adapt(cfg, backbone, data, engine_factory, (cfg.split_point,))
    elif cfg.scenario == "split_point_sweep":
        out = _user_adapt(cfg, backbone, data, engine_factory, cfg.split_points)
    elif cfg.scenario == "packet_loss_sweep":
        out = _loss_sweep(cfg, backbone, data, engine_factory)
    else:
        out = _noise_sweep(cfg, backbone, data, engine_factory)
    outdir = Path(output_dir if output_dir is not None else cfg.output_dir)
    paths = {"results": emit_csv(out.results, outdir / f"{cfg.scenario}.csv", RESULT_COLUMNS),
             "train_log": emit_csv(out.train_log, outdir / f"{cfg.scenario}_train_log.csv", TRAIN_LOG_COLUMNS)}
    if cfg.scenario == "packet_loss_sweep":
        paths["cross_eval"] = emit_csv(out.cross_eval, outdir / f"{cfg.scenario}_cross_eval.csv",
                                       CROSS_EVAL_COLUMNS)
    if cfg.scenario == "noise_privacy_sweep":
        paths["attack"] = emit_csv(out.attack, outdir / f"{cfg.scenario}_attack.csv", ATTACK_COLUMNS)
    return paths


def run_attack(cfg: ExperimentConfig, output_dir=None) -> Path:
    """Attack-only run: decoder per seed, scored on unadapted transmitted features over the sigma grid."""
    model = split_at(load_backbone(cfg.backbone_path), cfg.split_point)
    data = user_data(cfg)
    test = data.test.subset(np.arange(min(cfg.attack.eval_samples, len(data.test))))
    surrogate = generate_surrogate(cfg.dataset, cfg.data_seed, cfg.attack.surrogate_per_class)
    rows = []
    for seed in cfg.seeds:
        decoder = train_inverter(model, surrogate, cfg.attack, seed)
        for r in evaluate_attack(decoder, model, None, test, cfg.attack.sigmas, seed):
            rows.append({"seed": seed, "sigma": r.sigma, "condition": "without_salt",
                         "mean_ssim": r.mean_ssim, "mean_mse": r.mean_mse})
    outdir = Path(output_dir if output_dir is not None else cfg.output_dir)
    return emit_csv(rows, outdir / "attack.csv", ATTACK_COLUMNS)
