"""End-to-end training runs driven by a JSON run configuration."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import tensor as T
from .accountant import RdpAccountant, get_noise_multiplier
from .bench import Report
from .data import Dataset, PoissonLoader, load_csv, load_idx, make_blobs
from .errors import ConfigError
from .layers import ModelGraph, load_model, loss_forward_backward, model_from_dict
from .optimizer import (DpOptimizerConfig, LoaderConfig, NoiseSchedule, PlainModule, SGD,
                        make_private)

TRAIN_COLUMNS = ["epoch", "loss", "accuracy", "sigma", "q", "epsilon", "best_order"]


def default_seed() -> int:
    raw = os.environ.get("DPGRAD_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"DPGRAD_SEED must be an integer, got {raw!r}") from None


@dataclass
class RunConfig:
    model: Any  # path to an architecture file, or the architecture document itself
    dataset: Dict[str, Any] = field(default_factory=lambda: {"kind": "blobs"})
    epochs: int = 1
    sample_rate: Optional[float] = None
    logical_batch: Optional[int] = None
    physical_batch: Optional[int] = None
    sample_rates: Optional[List[float]] = None  # per-epoch q, for varying batch sizes
    noise_multiplier: Optional[float] = None
    target_epsilon: Optional[float] = None
    noise_schedule: str = "constant"
    delta: float = 1e-5
    max_grad_norm: float = 1.0
    lr: float = 0.1
    loss: str = "softmax_cross_entropy"
    seed_data: Optional[int] = None
    seed_noise: Optional[int] = None
    seed_model: Optional[int] = None
    secure_mode: bool = False
    mode: str = "dp"  # "dp" or "plain"
    averaging: str = "expected"
    out: Optional[str] = None
    format: str = "csv"

    def __post_init__(self):
        seed = default_seed()
        for name in ("seed_data", "seed_noise", "seed_model"):
            if getattr(self, name) is None:
                setattr(self, name, seed)
        if self.mode not in ("dp", "plain"):
            raise ConfigError(f"mode must be 'dp' or 'plain', got {self.mode!r}")
        if self.mode == "dp" and (self.noise_multiplier is None) == (self.target_epsilon is None):
            raise ConfigError("supply exactly one of noise_multiplier and target_epsilon")
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        if self.sample_rate is not None and self.logical_batch is not None:
            raise ConfigError("supply at most one of sample_rate and logical_batch")
        if self.physical_batch is not None and self.physical_batch <= 0:
            raise ConfigError("physical_batch must be positive")
        if self.sample_rates is not None and len(self.sample_rates) != self.epochs:
            raise ConfigError("sample_rates needs one entry per epoch")

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"run config: unknown keys {sorted(unknown)}")
        if "model" not in doc:
            raise ConfigError("run config: 'model' is required")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        base = Path(path).parent
        cfg = cls.from_dict(doc)
        if isinstance(cfg.model, str) and not Path(cfg.model).is_absolute():
            cfg.model = str(base / cfg.model)
        return cfg


def build_dataset(spec: Dict[str, Any], seed: int) -> Dataset:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "blobs":
        spec.setdefault("seed", seed)
        return make_blobs(**spec)
    if kind == "csv":
        return load_csv(spec["path"], spec.get("feature_columns"), spec.get("target_column"))
    if kind == "idx":
        return load_idx(spec["images"], spec["labels"])
    raise ConfigError(f"unknown dataset kind {kind!r}")


def build_model(cfg: RunConfig) -> ModelGraph:
    if isinstance(cfg.model, dict):
        return model_from_dict(cfg.model, seed=cfg.seed_model)
    return load_model(cfg.model, seed=cfg.seed_model)


def evaluate(model: ModelGraph, data: Dataset, loss_kind: str, chunk: int = 4096):
    total, correct = 0.0, 0
    for s in range(0, len(data), chunk):
        x, y = data.features[s:s + chunk], data.targets[s:s + chunk]
        out, _ = model.forward(x)
        losses, _ = loss_forward_backward(loss_kind, out, y)
        total += float(np.sum(losses, dtype=np.float64))
        if loss_kind == "softmax_cross_entropy":
            correct += int(np.sum(out.argmax(axis=1) == y))
    acc = correct / len(data) if loss_kind == "softmax_cross_entropy" else float("nan")
    return total / len(data), acc


@dataclass
class TrainResult:
    report: Report
    epsilon: float
    delta: float
    best_order: Optional[int]
    noise_multiplier: Optional[float]
    model: ModelGraph

    @property
    def losses(self) -> List[float]:
        return [float(v) for v in self.report.column("loss")]

    def summary(self) -> Dict[str, Any]:
        return {"final_loss": self.losses[-1], "initial_loss": self.losses[0],
                "final_accuracy": self.report.rows[-1][2], "epsilon": self.epsilon,
                "delta": self.delta, "best_order": self.best_order,
                "noise_multiplier": self.noise_multiplier}


def _rate_for_epoch(cfg: RunConfig, n: int, epoch: int) -> float:
    if cfg.sample_rates is not None:
        return float(cfg.sample_rates[epoch])
    if cfg.sample_rate is not None:
        return float(cfg.sample_rate)
    if cfg.logical_batch is not None:
        return min(1.0, cfg.logical_batch / n)
    raise ConfigError("supply sample_rate, sample_rates or logical_batch")


def cmd_train(cfg: RunConfig) -> TrainResult:
    """Validate, privatize, train for ``cfg.epochs`` and report per-epoch loss, accuracy and epsilon.

    Row 0 evaluates the freshly initialised model. Every epoch runs
    ``round(1/q)`` logical steps over Poisson batches; batches larger than
    ``physical_batch`` are split and folded with virtual steps.
    """
    data = build_dataset(cfg.dataset, cfg.seed_data)
    model = build_model(cfg)
    n = len(data)
    rates = [_rate_for_epoch(cfg, n, e) for e in range(cfg.epochs)]
    steps_per_epoch = [max(1, round(1.0 / q)) for q in rates]

    schedule = NoiseSchedule.parse(cfg.noise_schedule, cfg.noise_multiplier or 0.0)
    if cfg.mode == "dp" and cfg.target_epsilon is not None:
        if schedule.kind != "constant" or len(set(rates)) != 1:
            raise ConfigError("target_epsilon calibration needs a constant schedule and sample rate")
        sigma = get_noise_multiplier(cfg.target_epsilon, cfg.delta, rates[0], sum(steps_per_epoch))
        schedule = NoiseSchedule("constant", sigma)

    report = Report(list(TRAIN_COLUMNS), title="training run")
    loss0, acc0 = evaluate(model, data, cfg.loss)
    report.add(0, loss0, acc0, float("nan"), float("nan"), 0.0, 0)

    accountant = RdpAccountant()
    unaccounted = False  # set once a step runs with sigma = 0
    if cfg.mode == "dp":
        opt_cfg = DpOptimizerConfig(schedule.sigma(0), cfg.max_grad_norm, cfg.lr,
                                    expected_batch_size=rates[0] * n, secure_mode=cfg.secure_mode,
                                    averaging=cfg.averaging)
        module, optimizer, loader = make_private(
            model, opt_cfg, LoaderConfig(data, rates[0], seed=cfg.seed_data),
            accountant=accountant, noise_seed=cfg.seed_noise)
    else:
        rng = T.RngStream("secure") if cfg.secure_mode else T.RngStream("standard", cfg.seed_data)
        module, optimizer = PlainModule(model), SGD(model.parameters(), cfg.lr)
        loader = PoissonLoader(data, rates[0], rng)

    for epoch in range(cfg.epochs):
        q = rates[epoch]
        loader.sample_rate = q
        loader.steps = steps_per_epoch[epoch]
        sigma = schedule.sigma(epoch)
        if cfg.mode == "dp":
            optimizer.noise_multiplier = sigma
            optimizer.sample_rate = q
            optimizer.config.expected_batch_size = q * n
            if sigma == 0:
                optimizer.accountant = None
                unaccounted = True
        for x, y in loader:
            if cfg.mode == "plain":
                if len(x) == 0:
                    continue
                out = module(x)
                _, grad_logits = loss_forward_backward(cfg.loss, out, y)
                module.backward(grad_logits)
                optimizer.step()
                optimizer.zero_grad()
                continue
            chunk = cfg.physical_batch or max(len(x), 1)
            starts = list(range(0, len(x), chunk)) or [0]
            for k, s in enumerate(starts):
                out = module(x[s:s + chunk])
                _, grad_logits = loss_forward_backward(cfg.loss, out, y[s:s + chunk])
                module.backward(grad_logits)
                if k < len(starts) - 1:
                    optimizer.virtual_step()
            optimizer.step()
            optimizer.zero_grad()
        loss, acc = evaluate(model, data, cfg.loss)
        if cfg.mode == "dp" and not unaccounted:
            budget = accountant.get_privacy_spent(cfg.delta)
            eps, order = budget.epsilon, budget.best_order
        else:
            eps, order = float("inf"), 0
        report.add(epoch + 1, loss, acc, sigma if cfg.mode == "dp" else float("nan"), q, eps, order)

    eps, order = report.rows[-1][5], report.rows[-1][6]
    return TrainResult(report, eps, cfg.delta, order or None,
                       schedule.sigma(0) if cfg.mode == "dp" else None, model)
