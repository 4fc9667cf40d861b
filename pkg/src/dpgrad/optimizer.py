"""Clip, aggregate, noise and step.

Gradient lifecycle per parameter, in order::

    backward      -> p.grad_sample   per-sample, unclipped
    virtual_step  -> p.summed_grad   clipped and summed (accumulates), no noise
    step          -> p.grad          summed + N(0, (sigma*C)^2), divided by the batch denominator
    zero_grad     -> all three cleared

``step`` keeps ``grad_sample`` in place until ``zero_grad``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .accountant import RdpAccountant
from .data import Dataset, PoissonLoader
from .errors import LifecycleError, NumericError, ParameterError
from .grad_sample import (GradSampleModule, GradSampleRecord, GradSamplerRegistry,
                          summed_param_grads)
from .layers import ModelGraph, Parameter
from .validator import ValidationError, validate


@dataclass
class DpOptimizerConfig:
    noise_multiplier: float
    max_grad_norm: float
    learning_rate: float
    expected_batch_size: float
    secure_mode: bool = False
    # "expected": divide by expected_batch_size; "realized": by the samples actually seen
    averaging: str = "expected"
    # "noise_only": an empty logical batch still adds noise and steps; "error": raise
    empty_batch_policy: str = "noise_only"

    def __post_init__(self):
        if not self.noise_multiplier >= 0:
            raise ParameterError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if not self.max_grad_norm > 0:
            raise ParameterError(f"max_grad_norm must be > 0, got {self.max_grad_norm}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.expected_batch_size > 0:
            raise ParameterError(f"expected_batch_size must be > 0, got {self.expected_batch_size}")
        if self.averaging not in ("expected", "realized"):
            raise ParameterError(f"unknown averaging mode {self.averaging!r}")
        if self.empty_batch_policy not in ("noise_only", "error"):
            raise ParameterError(f"unknown empty batch policy {self.empty_batch_policy!r}")


@dataclass
class ClipSummary:
    per_sample_norms: np.ndarray
    scale_factors: np.ndarray
    num_clipped: int


def _as_mapping(gs) -> Mapping[str, np.ndarray]:
    return gs.grads if isinstance(gs, GradSampleRecord) else gs


def per_sample_norms(gs) -> np.ndarray:
    """Global l2 norm of each sample's gradient across all parameters (float64)."""
    grads = _as_mapping(gs)
    sq = None
    for name, g in grads.items():
        flat = g.reshape(g.shape[0], int(np.prod(g.shape[1:]))).astype(np.float64)
        if not np.all(np.isfinite(flat)):
            raise NumericError(f"non-finite per-sample gradient in parameter {name}")
        s = np.einsum("ij,ij->i", flat, flat)
        sq = s if sq is None else sq + s
    if sq is None:
        raise ParameterError("no per-sample gradients to clip")
    return np.sqrt(sq)


def clip_and_sum(gs, max_grad_norm: float) -> Tuple[Dict[str, np.ndarray], ClipSummary]:
    """Rescale each sample by ``C / max(N_i, C)`` and sum over the batch."""
    if not max_grad_norm > 0:
        raise ParameterError(f"max_grad_norm must be > 0, got {max_grad_norm}")
    grads = _as_mapping(gs)
    norms = per_sample_norms(grads)
    if norms.size == 0:
        raise ParameterError("clip_and_sum: empty batch")
    scale = max_grad_norm / np.maximum(norms, max_grad_norm)
    summed = {}
    for name, g in grads.items():
        flat = g.reshape(g.shape[0], -1)
        summed[name] = (scale.astype(g.dtype) @ flat).reshape(g.shape[1:])
    return summed, ClipSummary(norms, scale, int(np.count_nonzero(norms > max_grad_norm)))


def add_noise(summed: Mapping[str, np.ndarray], noise_multiplier: float, max_grad_norm: float,
              rng: T.RngStream) -> Dict[str, np.ndarray]:
    if noise_multiplier < 0:
        raise ParameterError("noise_multiplier must be >= 0")
    std = noise_multiplier * max_grad_norm
    return {k: v + T.gaussian(v.shape, std, rng, dtype=v.dtype) for k, v in summed.items()}


# ---------------------------------------------------------------------------
# noise schedules


@dataclass
class NoiseSchedule:
    """``kind`` is one of constant, exponential, step, custom.

    exponential: ``sigma0 * gamma**epoch``; step: ``sigma0 * factor**(epoch // period)``;
    custom: ``table[epoch]`` (last entry repeats) or ``fn(epoch)``.
    """

    kind: str
    sigma0: float = 1.0
    gamma: float = 1.0
    factor: float = 1.0
    period: int = 1
    table: Optional[Sequence[float]] = None
    fn: Optional[Callable[[int], float]] = None

    def __post_init__(self):
        if self.kind not in ("constant", "exponential", "step", "custom"):
            raise ParameterError(f"unknown noise schedule {self.kind!r}")
        if self.sigma0 < 0 or self.gamma < 0 or self.factor < 0:
            raise ParameterError("noise schedule parameters must be non-negative")
        if self.kind == "step" and self.period <= 0:
            raise ParameterError("step schedule period must be positive")
        if self.kind == "custom" and not (self.table or self.fn):
            raise ParameterError("custom schedule needs a table or a function")

    @classmethod
    def parse(cls, text: str, sigma0: float) -> "NoiseSchedule":
        """``constant`` | ``exponential:<gamma>`` | ``step:<factor>:<period>`` | ``custom:<s0>,<s1>,...``"""
        name, _, rest = text.partition(":")
        try:
            if name == "constant":
                return cls("constant", sigma0)
            if name == "exponential":
                return cls("exponential", sigma0, gamma=float(rest))
            if name == "step":
                f, p = rest.split(":")
                return cls("step", sigma0, factor=float(f), period=int(p))
            if name == "custom":
                return cls("custom", sigma0, table=[float(v) for v in rest.split(",")])
        except ValueError:
            pass
        raise ParameterError(f"cannot parse noise schedule {text!r}")

    def sigma(self, epoch: int) -> float:
        return schedule_noise(self, epoch)


def schedule_noise(sched: NoiseSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ParameterError("epoch must be non-negative")
    if sched.kind == "constant":
        s = sched.sigma0
    elif sched.kind == "exponential":
        s = sched.sigma0 * sched.gamma ** epoch
    elif sched.kind == "step":
        s = sched.sigma0 * sched.factor ** (epoch // sched.period)
    elif sched.fn is not None:
        s = float(sched.fn(epoch))
    else:
        s = float(sched.table[min(epoch, len(sched.table) - 1)])
    if not s >= 0:
        raise ParameterError(f"schedule produced negative noise multiplier {s} at epoch {epoch}")
    return s


# ---------------------------------------------------------------------------
# optimizers


class DPOptimizer:
    """DP-SGD on top of plain SGD.

    ``sample_rate`` and ``accountant`` are optional; when both are set every
    logical step is recorded as one subsampled-Gaussian invocation.
    """

    def __init__(self, params: Sequence[Parameter], config: DpOptimizerConfig,
                 rng: Optional[T.RngStream] = None, accountant: Optional[RdpAccountant] = None,
                 sample_rate: Optional[float] = None):
        self.params = list(params)
        self.config = config
        if rng is None:
            rng = T.RngStream("secure") if config.secure_mode else T.RngStream("standard", 0)
        elif config.secure_mode and rng.kind != "secure":
            raise ParameterError("secure_mode requires a secure noise stream")
        self.rng = rng
        self.accountant = accountant
        self.sample_rate = sample_rate
        self.noise_multiplier = config.noise_multiplier
        self.last_clip: Optional[ClipSummary] = None
        self.steps_taken = 0
        self._reset()

    def _reset(self):
        self._batches = 0
        self._samples = 0
        self._consumed = False

    # -- lifecycle --------------------------------------------------------

    def _fresh_grad_sample(self) -> bool:
        present = [p.grad_sample is not None for p in self.params]
        if any(present) and not all(present):
            raise LifecycleError("grad_sample populated for only some parameters")
        return all(present) and bool(self.params) and not self._consumed

    def _accumulate(self) -> None:
        if any(p.grad is not None for p in self.params):
            raise LifecycleError("optimizer already stepped; call zero_grad() first")
        if not self._fresh_grad_sample():
            raise LifecycleError("no per-sample gradients; run forward and backward first")
        b = self.params[0].grad_sample.shape[0]
        for p in self.params:
            if p.summed_grad is None:
                p.summed_grad = np.zeros(p.shape, dtype=p.data.dtype)
        if b:
            summed, self.last_clip = clip_and_sum({p.name: p.grad_sample for p in self.params},
                                                  self.config.max_grad_norm)
            for p in self.params:
                p.summed_grad = p.summed_grad + summed[p.name]
        self._batches += 1
        self._samples += b
        self._consumed = True

    def virtual_step(self) -> None:
        """Fold the current physical batch into ``summed_grad`` without stepping."""
        self._accumulate()
        for p in self.params:
            p.grad_sample = None
        self._consumed = False

    def step(self) -> None:
        if any(p.grad is not None for p in self.params):
            raise LifecycleError("optimizer already stepped; call zero_grad() first")
        if self._fresh_grad_sample():
            self._accumulate()
        if self._batches == 0 or any(p.summed_grad is None for p in self.params):
            raise LifecycleError("step() before any clipped gradients were accumulated")
        cfg = self.config
        if self._samples == 0 and cfg.empty_batch_policy == "error":
            raise LifecycleError("logical batch holds zero samples and the empty-batch policy is 'error'")
        if cfg.averaging == "realized":
            if self._samples == 0:
                raise LifecycleError("realized averaging undefined for an empty logical batch")
            denom = float(self._samples)
        else:
            denom = float(cfg.expected_batch_size)
        noised = add_noise({p.name: p.summed_grad for p in self.params},
                           self.noise_multiplier, cfg.max_grad_norm, self.rng)
        for p in self.params:
            p.grad = noised[p.name] / p.data.dtype.type(denom)
            p.data = p.data - p.data.dtype.type(cfg.learning_rate) * p.grad
        self.steps_taken += 1
        if self.accountant is not None and self.sample_rate is not None:
            self.accountant.step(self.noise_multiplier, self.sample_rate)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
            p.grad_sample = None
            p.summed_grad = None
        self._reset()


class PlainModule:
    """Non-private counterpart of GradSampleModule: ``backward`` sets ``p.grad`` to the mean-loss gradient."""

    def __init__(self, model: ModelGraph):
        self.model = model
        self._cache = None

    def parameters(self):
        return self.model.parameters()

    def __call__(self, x):
        out, self._cache = self.model.forward(x)
        return out

    def backward(self, grad_logits: np.ndarray) -> None:
        if self._cache is None:
            raise LifecycleError("backward called before forward")
        highways = self.model.backward(grad_logits, self._cache)
        b = self._cache.batch_size
        grads = summed_param_grads(self.model, self._cache, highways)
        for p in self.model.parameters():
            g = grads[p.name] / p.data.dtype.type(b)
            p.grad = g if p.grad is None else p.grad + g
        self._cache = None


class SGD:
    def __init__(self, params: Sequence[Parameter], learning_rate: float):
        self.params = list(params)
        self.learning_rate = learning_rate

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise LifecycleError(f"{p.name}: step() without a gradient")
            p.data = p.data - p.data.dtype.type(self.learning_rate) * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class LoaderConfig:
    dataset: Dataset
    sample_rate: float
    seed: int = 0
    steps_per_epoch: Optional[int] = None


def make_private(model: ModelGraph, optimizer_cfg: DpOptimizerConfig, loader_cfg: LoaderConfig,
                 accountant: Optional[RdpAccountant] = None, noise_seed: int = 0,
                 registry: Optional[GradSamplerRegistry] = None):
    """Validate ``model`` and return ``(GradSampleModule, DPOptimizer, PoissonLoader)``.

    In secure mode both the noise and the batch composition come from the OS
    CSPRNG and the seeds are ignored.
    """
    violations = validate(model, registry)
    if violations:
        raise ValidationError(violations)
    if optimizer_cfg.secure_mode:
        noise_rng, data_rng = T.RngStream("secure"), T.RngStream("secure")
    else:
        noise_rng, data_rng = T.RngStream("standard", noise_seed), T.RngStream("standard", loader_cfg.seed)
    loader = PoissonLoader(loader_cfg.dataset, loader_cfg.sample_rate, data_rng, loader_cfg.steps_per_epoch)
    gsm = GradSampleModule(model, registry)
    opt = DPOptimizer(model.parameters(), optimizer_cfg, noise_rng, accountant, loader_cfg.sample_rate)
    return gsm, opt, loader
