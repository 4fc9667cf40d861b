"""Vectorized per-sample gradients and the micro-batching reference.

The vectorized path runs one forward and one backward pass. The forward
cache keeps each layer's input activations; the backward pass yields the
gradient at each layer's output (the "highway" gradient). A per-kind rule
then combines the two into per-sample parameter gradients, e.g. for a
linear layer the ``n...i,n...j->nij`` contraction of highway gradients with
activations.

Hooks are replaced by an explicit call protocol: ``forward`` stores the
cache, ``backward`` consumes it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError, LifecycleError, RegistryError
from .layers import (Conv2d, ForwardCache, Layer, ModelGraph, indices_of,
                     loss_forward_backward)

Rule = Callable[[Layer, dict, np.ndarray], Dict[str, np.ndarray]]


@dataclass
class GradSampleRecord:
    """Per-sample gradients keyed by parameter name, each shaped ``[b, *param.shape]``."""

    grads: Dict[str, np.ndarray]
    batch_size: int

    def __post_init__(self):
        for name, g in self.grads.items():
            if g.shape[0] != self.batch_size:
                raise DimensionError(f"{name}: leading extent {g.shape[0]} != batch size {self.batch_size}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.grads)

    def items(self):
        return self.grads.items()

    def element_count(self) -> int:
        return sum(g.size for g in self.grads.values())

    def flat(self) -> np.ndarray:
        """``[b, total_params]`` view, parameters concatenated in model order."""
        rows = [g.reshape(self.batch_size, int(np.prod(g.shape[1:]))) for g in self.grads.values()]
        return np.concatenate(rows, axis=1)

    def mean(self) -> Dict[str, np.ndarray]:
        return {k: g.mean(axis=0) for k, g in self.grads.items()}


class GradSamplerRegistry:
    """Map from layer kind to its per-sample gradient rule."""

    def __init__(self, rules: Optional[Dict[str, Rule]] = None):
        self._rules: Dict[str, Rule] = dict(rules or {})

    def __contains__(self, kind: str) -> bool:
        return kind in self._rules

    def kinds(self):
        return sorted(self._rules)

    def get(self, kind: str) -> Rule:
        try:
            return self._rules[kind]
        except KeyError:
            raise RegistryError(f"no per-sample gradient rule registered for layer kind {kind!r}") from None

    def register(self, kind: str, rule: Optional[Rule] = None, *, override: bool = False):
        """Register ``rule`` for ``kind``; usable as a decorator when ``rule`` is omitted."""
        def deco(fn: Rule) -> Rule:
            if kind in self._rules and not override:
                raise RegistryError(f"a rule for {kind!r} is already registered (pass override=True)")
            self._rules[kind] = fn
            return fn
        if rule is None:
            return deco
        deco(rule)
        return self

    def copy(self) -> "GradSamplerRegistry":
        return GradSamplerRegistry(self._rules)


DEFAULT_REGISTRY = GradSamplerRegistry()


def register_rule(kind: str, rule: Optional[Rule] = None, *, override: bool = False,
                  registry: Optional[GradSamplerRegistry] = None):
    return (registry or DEFAULT_REGISTRY).register(kind, rule, override=override)


# ---------------------------------------------------------------------------
# built-in rules


def per_sample_rule_linear(acts: np.ndarray, hw: np.ndarray, bias: bool = True):
    weight = T.batched_outer(hw, acts)
    if not bias:
        return weight, None
    b, r = hw.shape[0], hw.shape[-1]
    return weight, hw.reshape(b, -1, r).sum(axis=1)


def per_sample_rule_embedding(indices: np.ndarray, hw: np.ndarray, vocab: int) -> np.ndarray:
    idx = indices_of(indices, vocab)
    b, dim = hw.shape[0], hw.shape[-1]
    if hw.shape[:-1] != idx.shape:
        raise DimensionError(f"embedding rule: indices {idx.shape} vs highway {hw.shape}")
    out = np.zeros((b, vocab, dim), dtype=hw.dtype)
    rows = np.broadcast_to(np.arange(b).reshape((b,) + (1,) * (idx.ndim - 1)), idx.shape)
    np.add.at(out, (rows.ravel(), idx.ravel()), hw.reshape(-1, dim))
    return out


def per_sample_rule_layer_norm(xhat: np.ndarray, hw: np.ndarray, norm_ndim: int):
    b = hw.shape[0]
    tail = hw.shape[hw.ndim - norm_ndim:]
    gamma = (hw * xhat).reshape((b, -1) + tail).sum(axis=1)
    beta = hw.reshape((b, -1) + tail).sum(axis=1)
    return gamma, beta


def per_sample_rule_group_norm(xhat: np.ndarray, hw: np.ndarray):
    axes = tuple(range(2, hw.ndim))
    return (hw * xhat).sum(axis=axes), hw.sum(axis=axes)


def per_sample_rule_conv2d(cols: np.ndarray, hw: np.ndarray, weight_shape, bias: bool = True):
    g = Conv2d.grad_cols(hw)
    weight = T.batched_outer(g, cols).reshape((hw.shape[0],) + tuple(weight_shape))
    return weight, (g.sum(axis=1) if bias else None)


@register_rule("linear")
def _linear_rule(layer, cache, hw):
    w, b = per_sample_rule_linear(cache["input"], hw, bias="bias" in layer.params)
    return {"weight": w} if b is None else {"weight": w, "bias": b}


@register_rule("embedding")
def _embedding_rule(layer, cache, hw):
    return {"weight": per_sample_rule_embedding(cache["indices"], hw, layer.desc.hyper["num_embeddings"])}


@register_rule("conv2d")
def _conv_rule(layer, cache, hw):
    w, b = per_sample_rule_conv2d(cache["cols"], hw, layer.params["weight"].shape,
                                  bias="bias" in layer.params)
    return {"weight": w} if b is None else {"weight": w, "bias": b}


@register_rule("layer_norm")
def _layer_norm_rule(layer, cache, hw):
    g, b = per_sample_rule_layer_norm(cache["xhat"], hw, len(layer.desc.hyper["normalized_shape"]))
    return {"weight": g, "bias": b}


def _group_norm_rule(layer, cache, hw):
    if not layer.params:
        return {}
    g, b = per_sample_rule_group_norm(cache["xhat"], hw)
    return {"weight": g, "bias": b}


register_rule("group_norm", _group_norm_rule)
register_rule("instance_norm", _group_norm_rule)


def _no_params(layer, cache, hw):
    return {}


register_rule("relu", _no_params)
register_rule("flatten", _no_params)


# ---------------------------------------------------------------------------
# engines


def check_registered(model: ModelGraph, registry: Optional[GradSamplerRegistry] = None) -> None:
    registry = registry or DEFAULT_REGISTRY
    for layer in model.layers:
        registry.get(layer.kind)


def grad_samples_from_pass(model: ModelGraph, cache: ForwardCache, highways: List[np.ndarray],
                           registry: Optional[GradSamplerRegistry] = None) -> GradSampleRecord:
    registry = registry or DEFAULT_REGISTRY
    out: Dict[str, np.ndarray] = {}
    for i, layer in enumerate(model.layers):
        rule = registry.get(layer.kind)
        per_param = rule(layer, cache.layers[i], highways[i])
        for pname, param in layer.params.items():
            if pname not in per_param:
                raise RegistryError(f"layer {i} ({layer.kind}): rule returned no gradient for {pname!r}")
            g = per_param[pname]
            if g.shape != (cache.batch_size,) + param.shape:
                raise DimensionError(f"layer {i} ({layer.kind}) {pname}: per-sample gradient shape "
                                     f"{g.shape} != {(cache.batch_size,) + param.shape}")
            out[param.name] = g
    return GradSampleRecord(out, cache.batch_size)


def compute_grad_samples(model: ModelGraph, batch_input: np.ndarray, targets, loss_kind: str,
                         registry: Optional[GradSamplerRegistry] = None,
                         return_loss: bool = False):
    """Per-sample gradients of each sample's own loss, from one forward and one backward pass."""
    check_registered(model, registry)
    if len(batch_input) == 0:
        raise DimensionError("compute_grad_samples: empty batch")
    output, cache = model.forward(batch_input)
    losses, grad_logits = loss_forward_backward(loss_kind, output, targets)
    highways = model.backward(grad_logits, cache)
    record = grad_samples_from_pass(model, cache, highways, registry)
    if return_loss:
        return record, losses
    return record


def summed_param_grads(model: ModelGraph, cache: ForwardCache, highways: List[np.ndarray]) -> Dict[str, np.ndarray]:
    """Ordinary (non-private) parameter gradients, summed over the batch."""
    out = {}
    for i, layer in enumerate(model.layers):
        grads = layer.impl.param_grads(layer.desc.hyper, layer.arrays(), highways[i], cache.layers[i])
        for pname, param in layer.params.items():
            out[param.name] = grads[pname]
    return out


def batch_gradient(model: ModelGraph, batch_input, targets, loss_kind: str):
    """Gradient of the mean batch loss; returns ``(grads, mean_loss)``."""
    output, cache = model.forward(batch_input)
    losses, grad_logits = loss_forward_backward(loss_kind, output, targets)
    highways = model.backward(grad_logits, cache)
    b = len(batch_input)
    grads = {k: v / b for k, v in summed_param_grads(model, cache, highways).items()}
    return grads, float(losses.mean())


def _microbatch(model: ModelGraph, batch_input, grad_fn) -> Dict[str, np.ndarray]:
    b = len(batch_input)
    per_sample = []
    for i in range(b):
        output, cache = model.forward(batch_input[i:i + 1])
        highways = model.backward(grad_fn(i, output), cache)
        per_sample.append(summed_param_grads(model, cache, highways))
        # nothing carries over between samples: each pass starts from fresh gradients
    names = [p.name for p in model.parameters()]
    return {n: np.stack([g[n] for g in per_sample]) for n in names}


def microbatch_oracle(model: ModelGraph, batch_input, targets, loss_kind: str,
                      registry: Optional[GradSamplerRegistry] = None) -> GradSampleRecord:
    """Per-sample gradients the slow way: one full forward/backward per sample."""
    check_registered(model, registry)
    b = len(batch_input)
    if b == 0:
        raise DimensionError("microbatch_oracle: empty batch")
    targets = np.asarray(targets)

    def grad_fn(i, output):
        return loss_forward_backward(loss_kind, output, targets[i:i + 1])[1]

    return GradSampleRecord(_microbatch(model, batch_input, grad_fn), b)


def microbatch_oracle_pass(model: ModelGraph, batch_input) -> Dict[str, np.ndarray]:
    """Micro-batched per-sample gradients of the summed layer output (benchmark loss)."""
    return _microbatch(model, batch_input, lambda i, out: np.ones_like(out, dtype=model.dtype))


class GradSampleModule:
    """Model wrapper that fills ``Parameter.grad_sample`` on every backward call.

    Usage mirrors an ordinary training loop::

        out = gsm(x)
        losses, grad_logits = loss_forward_backward("softmax_cross_entropy", out, y)
        gsm.backward(grad_logits)

    An empty batch produces zero-row per-sample gradients without running
    the layers, so a Poisson batch of size 0 flows through unchanged.
    """

    def __init__(self, model: ModelGraph, registry: Optional[GradSamplerRegistry] = None):
        self.model = model
        self.registry = registry or DEFAULT_REGISTRY
        check_registered(model, self.registry)
        self._cache: Optional[ForwardCache] = None
        self._empty_batch = False

    def parameters(self):
        return self.model.parameters()

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if len(x) == 0:
            self._cache = None
            self._empty_batch = True
            out_shape = self.model.shapes()[-1] if self.model.layers else self.model.input_shape
            return np.zeros((0,) + tuple(out_shape), dtype=self.model.dtype)
        self._empty_batch = False
        out, self._cache = self.model.forward(x)
        return out

    def backward(self, grad_logits: np.ndarray) -> None:
        params = self.model.parameters()
        for p in params:
            if p.grad_sample is not None:
                raise LifecycleError(
                    f"{p.name}: grad_sample still holds an unconsumed batch; "
                    "call optimizer.virtual_step(), step() or zero_grad() first")
            if p.grad is not None:
                raise LifecycleError(f"{p.name}: optimizer stepped; call zero_grad() before the next backward")
        if self._empty_batch:
            for p in params:
                p.grad_sample = np.zeros((0,) + p.shape, dtype=p.data.dtype)
            self._empty_batch = False
            return
        if self._cache is None:
            raise LifecycleError("backward called before forward")
        highways = self.model.backward(grad_logits, self._cache)
        record = grad_samples_from_pass(self.model, self._cache, highways, self.registry)
        self._cache = None
        for p in params:
            p.grad_sample = record[p.name]
