"""Layer kinds, sequential models and losses with hand-written backward passes.

Every layer kind implements four things:

* ``init_params`` - create its parameters,
* ``forward`` - output plus a cache holding the layer input (and the
  normalization intermediates where relevant),
* ``backward_input`` - gradient with respect to the layer input,
* ``param_grads`` - batch-summed parameter gradients (the non-private path).

Per-sample parameter gradients live in :mod:`dpgrad.grad_sample`; they only
read the cache and the gradient flowing into the layer output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, LifecycleError, ParameterError

NORM_EPS = 1e-5

SUPPORTED_KINDS = ("linear", "embedding", "conv2d", "layer_norm", "group_norm",
                   "instance_norm", "relu", "flatten")
DESCRIPTOR_ONLY_KINDS = ("batch_norm",)


@dataclass
class LayerDescriptor:
    kind: str
    hyper: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, **self.hyper}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "LayerDescriptor":
        d = dict(d)
        try:
            kind = d.pop("kind")
        except KeyError:
            raise ConfigError(f"layer entry without 'kind': {d}") from None
        return cls(kind, d)


class Parameter:
    """A trainable tensor with the three gradient stages attached.

    ``grad_sample`` holds unclipped per-sample gradients, ``summed_grad``
    the clipped sum over the batch, ``grad`` the final noised average.
    """

    __slots__ = ("name", "data", "grad", "grad_sample", "summed_grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.grad_sample: Optional[np.ndarray] = None
        self.summed_grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


# ---------------------------------------------------------------------------
# layer kinds


class LayerKind:
    kind = ""

    def check(self, hyper: Dict[str, Any]) -> None:
        pass

    def init_params(self, hyper, rng: T.RngStream, dtype) -> Dict[str, np.ndarray]:
        return {}

    def out_shape(self, hyper, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return in_shape

    def forward(self, hyper, params, x):
        raise NotImplementedError

    def backward_input(self, hyper, params, grad_out, cache):
        raise NotImplementedError

    def param_grads(self, hyper, params, grad_out, cache) -> Dict[str, np.ndarray]:
        return {}


def _positive_int(hyper, key, kind):
    v = hyper.get(key)
    if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v <= 0:
        raise ConfigError(f"{kind}: '{key}' must be a positive integer, got {v!r}")
    return int(v)


def _uniform(rng, shape, bound, dtype):
    return ((rng.uniform(T.numel(shape)) * 2.0 - 1.0) * bound).astype(dtype).reshape(shape)


class Linear(LayerKind):
    kind = "linear"

    def check(self, hyper):
        _positive_int(hyper, "in_features", self.kind)
        _positive_int(hyper, "out_features", self.kind)

    def init_params(self, hyper, rng, dtype):
        d, r = hyper["in_features"], hyper["out_features"]
        bound = 1.0 / math.sqrt(d)
        params = {"weight": _uniform(rng, (r, d), bound, dtype)}
        if hyper.get("bias", True):
            params["bias"] = _uniform(rng, (r,), bound, dtype)
        return params

    def out_shape(self, hyper, in_shape):
        if len(in_shape) < 1 or in_shape[-1] != hyper["in_features"]:
            raise DimensionError(
                f"linear expects trailing extent {hyper['in_features']}, got input {in_shape}")
        return in_shape[:-1] + (hyper["out_features"],)

    def forward(self, hyper, params, x):
        w = params["weight"]
        y = (x.reshape(-1, x.shape[-1]) @ w.T).reshape(x.shape[:-1] + (w.shape[0],))
        if "bias" in params:
            y = y + params["bias"]
        return y, {"input": x}

    def backward_input(self, hyper, params, grad_out, cache):
        w = params["weight"]
        g = grad_out.reshape(-1, grad_out.shape[-1])
        return (g @ w).reshape(cache["input"].shape)

    def param_grads(self, hyper, params, grad_out, cache):
        x = cache["input"]
        g2 = grad_out.reshape(-1, grad_out.shape[-1])
        out = {"weight": T.matmul(g2.T, x.reshape(-1, x.shape[-1]))}
        if "bias" in params:
            out["bias"] = g2.sum(axis=0)
        return out


class Embedding(LayerKind):
    kind = "embedding"

    def check(self, hyper):
        _positive_int(hyper, "num_embeddings", self.kind)
        _positive_int(hyper, "embedding_dim", self.kind)

    def init_params(self, hyper, rng, dtype):
        shape = (hyper["num_embeddings"], hyper["embedding_dim"])
        return {"weight": rng.standard_normal(T.numel(shape)).astype(dtype).reshape(shape)}

    def out_shape(self, hyper, in_shape):
        return in_shape + (hyper["embedding_dim"],)

    def forward(self, hyper, params, x):
        idx = indices_of(x, hyper["num_embeddings"])
        return params["weight"][idx], {"input": x, "indices": idx}

    def backward_input(self, hyper, params, grad_out, cache):
        # indices are not differentiable
        return np.zeros(cache["input"].shape, dtype=grad_out.dtype)

    def param_grads(self, hyper, params, grad_out, cache):
        dim = hyper["embedding_dim"]
        out = np.zeros((hyper["num_embeddings"], dim), dtype=grad_out.dtype)
        np.add.at(out, cache["indices"].ravel(), grad_out.reshape(-1, dim))
        return {"weight": out}


def indices_of(x: np.ndarray, vocab: int) -> np.ndarray:
    idx = np.asarray(x)
    if idx.dtype.kind == "f":
        if not np.all(np.equal(np.mod(idx, 1), 0)):
            raise ParameterError("embedding input must hold integer token ids")
    idx = idx.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise ParameterError(f"embedding index out of range [0, {vocab}): "
                             f"min={idx.min()} max={idx.max()}")
    return idx


def _pair(v, name):
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ConfigError(f"conv2d: '{name}' must be an int or a pair")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_geometry(hyper, h, w):
    kh, kw = _pair(hyper["kernel_size"], "kernel_size")
    sh, sw = _pair(hyper.get("stride", 1), "stride")
    ph, pw = _pair(hyper.get("padding", 0), "padding")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    return kh, kw, sh, sw, ph, pw, oh, ow


def im2col(x: np.ndarray, kh, kw, sh, sw, ph, pw, oh, ow) -> np.ndarray:
    """[b, C, H, W] -> [b, oh*ow, C*kh*kw], patch layout (C, kh, kw)."""
    b, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b, oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, x_shape, kh, kw, sh, sw, ph, pw, oh, ow) -> np.ndarray:
    b, c, h, w = x_shape
    cols = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += cols[:, :, i, j]
    return xp[:, :, ph:ph + h, pw:pw + w]


class Conv2d(LayerKind):
    kind = "conv2d"

    def check(self, hyper):
        _positive_int(hyper, "in_channels", self.kind)
        _positive_int(hyper, "out_channels", self.kind)
        if "kernel_size" not in hyper:
            raise ConfigError("conv2d: 'kernel_size' is required")
        if min(_pair(hyper["kernel_size"], "kernel_size")) <= 0:
            raise ConfigError("conv2d: kernel extents must be positive")
        if min(_pair(hyper.get("stride", 1), "stride")) <= 0:
            raise ConfigError("conv2d: stride must be positive")
        if min(_pair(hyper.get("padding", 0), "padding")) < 0:
            raise ConfigError("conv2d: padding must be non-negative")
        for key in ("groups", "dilation"):
            if _pair(hyper.get(key, 1), key) != (1, 1):
                raise ConfigError(f"conv2d: only {key}=1 is supported")

    def init_params(self, hyper, rng, dtype):
        kh, kw = _pair(hyper["kernel_size"], "kernel_size")
        c_in, c_out = hyper["in_channels"], hyper["out_channels"]
        bound = 1.0 / math.sqrt(c_in * kh * kw)
        params = {"weight": _uniform(rng, (c_out, c_in, kh, kw), bound, dtype)}
        if hyper.get("bias", True):
            params["bias"] = _uniform(rng, (c_out,), bound, dtype)
        return params

    def out_shape(self, hyper, in_shape):
        if len(in_shape) != 3 or in_shape[0] != hyper["in_channels"]:
            raise DimensionError(
                f"conv2d expects per-sample shape ({hyper['in_channels']}, H, W), got {in_shape}")
        *_, oh, ow = conv_geometry(hyper, in_shape[1], in_shape[2])
        if oh <= 0 or ow <= 0:
            raise DimensionError(f"conv2d kernel larger than padded input {in_shape}")
        return (hyper["out_channels"], oh, ow)

    def forward(self, hyper, params, x):
        geo = conv_geometry(hyper, x.shape[2], x.shape[3])
        oh, ow = geo[-2:]
        cols = im2col(x, *geo)
        w = params["weight"].reshape(params["weight"].shape[0], -1)
        y = cols @ w.T  # [b, L, out]
        if "bias" in params:
            y = y + params["bias"]
        y = y.transpose(0, 2, 1).reshape(x.shape[0], -1, oh, ow)
        return y, {"input": x, "cols": cols, "geometry": geo}

    @staticmethod
    def grad_cols(grad_out):
        # [b, out, oh, ow] -> [b, oh*ow, out]
        b, c = grad_out.shape[:2]
        return grad_out.reshape(b, c, -1).transpose(0, 2, 1)

    def backward_input(self, hyper, params, grad_out, cache):
        w = params["weight"].reshape(params["weight"].shape[0], -1)
        dcols = self.grad_cols(grad_out) @ w
        return col2im(dcols, cache["input"].shape, *cache["geometry"])

    def param_grads(self, hyper, params, grad_out, cache):
        b, c = grad_out.shape[:2]
        g = grad_out.reshape(b, c, -1)
        gw = np.matmul(g, cache["cols"]).sum(axis=0)
        out = {"weight": gw.reshape(params["weight"].shape)}
        if "bias" in params:
            out["bias"] = g.sum(axis=(0, 2))
        return out


def _normalize(xg: np.ndarray, axes, eps):
    mean = xg.mean(axis=axes, keepdims=True)
    var = ((xg - mean) ** 2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return (xg - mean) * inv_std, inv_std


def _normalize_backward(dxhat, xhat, inv_std, axes):
    m1 = dxhat.mean(axis=axes, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (dxhat - m1 - xhat * m2)


class LayerNorm(LayerKind):
    kind = "layer_norm"

    def check(self, hyper):
        ns = hyper.get("normalized_shape")
        if isinstance(ns, int):
            ns = [ns]
        if not ns or any((not isinstance(s, int)) or s <= 0 for s in ns):
            raise ConfigError(f"layer_norm: bad normalized_shape {hyper.get('normalized_shape')!r}")
        hyper["normalized_shape"] = list(ns)
        if hyper.get("eps", NORM_EPS) <= 0:
            raise ConfigError("layer_norm: eps must be > 0")

    def init_params(self, hyper, rng, dtype):
        ns = tuple(hyper["normalized_shape"])
        return {"weight": np.ones(ns, dtype=dtype), "bias": np.zeros(ns, dtype=dtype)}

    def out_shape(self, hyper, in_shape):
        ns = tuple(hyper["normalized_shape"])
        if in_shape[len(in_shape) - len(ns):] != ns:
            raise DimensionError(f"layer_norm over {ns} cannot take per-sample input {in_shape}")
        return in_shape

    def _axes(self, hyper, x):
        k = len(hyper["normalized_shape"])
        return tuple(range(x.ndim - k, x.ndim))

    def forward(self, hyper, params, x):
        axes = self._axes(hyper, x)
        xhat, inv_std = _normalize(x, axes, hyper.get("eps", NORM_EPS))
        xhat = xhat.astype(x.dtype)
        y = xhat * params["weight"] + params["bias"]
        return y, {"input": x, "xhat": xhat, "inv_std": inv_std}

    def backward_input(self, hyper, params, grad_out, cache):
        axes = self._axes(hyper, cache["input"])
        dx = _normalize_backward(grad_out * params["weight"], cache["xhat"], cache["inv_std"], axes)
        return dx.astype(grad_out.dtype)

    def param_grads(self, hyper, params, grad_out, cache):
        lead = tuple(range(grad_out.ndim - len(hyper["normalized_shape"])))
        return {"weight": (grad_out * cache["xhat"]).sum(axis=lead),
                "bias": grad_out.sum(axis=lead)}


class GroupNorm(LayerKind):
    kind = "group_norm"

    def check(self, hyper):
        g = _positive_int(hyper, "num_groups", self.kind)
        c = _positive_int(hyper, "num_channels", self.kind)
        if c % g:
            raise ConfigError(f"group_norm: {c} channels not divisible into {g} groups")
        if hyper.get("eps", NORM_EPS) <= 0:
            raise ConfigError("group_norm: eps must be > 0")

    def _affine(self, hyper):
        return hyper.get("affine", True)

    def _groups(self, hyper):
        return hyper["num_groups"]

    def _channels(self, hyper):
        return hyper["num_channels"]

    def init_params(self, hyper, rng, dtype):
        if not self._affine(hyper):
            return {}
        c = self._channels(hyper)
        return {"weight": np.ones(c, dtype=dtype), "bias": np.zeros(c, dtype=dtype)}

    def out_shape(self, hyper, in_shape):
        if len(in_shape) < 1 or in_shape[0] != self._channels(hyper):
            raise DimensionError(
                f"{self.kind} expects {self._channels(hyper)} channels, got per-sample input {in_shape}")
        return in_shape

    @staticmethod
    def _bshape(x):
        return (1, x.shape[1]) + (1,) * (x.ndim - 2)

    def forward(self, hyper, params, x):
        b, g = x.shape[0], self._groups(hyper)
        xg = x.reshape(b, g, -1)
        xhat, inv_std = _normalize(xg, (2,), hyper.get("eps", NORM_EPS))
        xhat = xhat.reshape(x.shape).astype(x.dtype)
        y = xhat
        if params:
            y = xhat * params["weight"].reshape(self._bshape(x)) + params["bias"].reshape(self._bshape(x))
        return y, {"input": x, "xhat": xhat, "inv_std": inv_std}

    def backward_input(self, hyper, params, grad_out, cache):
        x = cache["input"]
        b, g = x.shape[0], self._groups(hyper)
        dxhat = grad_out * params["weight"].reshape(self._bshape(x)) if params else grad_out
        dx = _normalize_backward(dxhat.reshape(b, g, -1), cache["xhat"].reshape(b, g, -1),
                                 cache["inv_std"], (2,))
        return dx.reshape(x.shape).astype(grad_out.dtype)

    def param_grads(self, hyper, params, grad_out, cache):
        if not params:
            return {}
        axes = (0,) + tuple(range(2, grad_out.ndim))
        return {"weight": (grad_out * cache["xhat"]).sum(axis=axes), "bias": grad_out.sum(axis=axes)}


class InstanceNorm(GroupNorm):
    """Per-sample, per-channel normalization: group norm with one channel per group."""

    kind = "instance_norm"

    def check(self, hyper):
        _positive_int(hyper, "num_features", self.kind)
        if hyper.get("eps", NORM_EPS) <= 0:
            raise ConfigError("instance_norm: eps must be > 0")

    def _affine(self, hyper):
        return hyper.get("affine", False)

    def _groups(self, hyper):
        return hyper["num_features"]

    def _channels(self, hyper):
        return hyper["num_features"]

    def forward(self, hyper, params, x):
        if hyper.get("track_running_stats", False):
            raise LifecycleError("instance_norm with track_running_stats keeps statistics "
                                 "outside the privacy guarantee; clear the flag first")
        return super().forward(hyper, params, x)


class ReLU(LayerKind):
    kind = "relu"

    def forward(self, hyper, params, x):
        return np.maximum(x, 0), {"input": x}

    def backward_input(self, hyper, params, grad_out, cache):
        return grad_out * (cache["input"] > 0)


class Flatten(LayerKind):
    kind = "flatten"

    def out_shape(self, hyper, in_shape):
        return (T.numel(in_shape),)

    def forward(self, hyper, params, x):
        return x.reshape(x.shape[0], T.numel(x.shape[1:])), {"input": x}

    def backward_input(self, hyper, params, grad_out, cache):
        return grad_out.reshape(cache["input"].shape)


class BatchNorm(LayerKind):
    kind = "batch_norm"

    def check(self, hyper):
        _positive_int(hyper, "num_features", self.kind)

    def out_shape(self, hyper, in_shape):
        return in_shape

    def forward(self, hyper, params, x):
        raise LifecycleError("batch_norm mixes statistics across samples and has no private forward")


KINDS: Dict[str, LayerKind] = {k.kind: k for k in (
    Linear(), Embedding(), Conv2d(), LayerNorm(), GroupNorm(), InstanceNorm(),
    ReLU(), Flatten(), BatchNorm())}


# ---------------------------------------------------------------------------
# sequential model


@dataclass
class Layer:
    desc: LayerDescriptor
    params: Dict[str, Parameter] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.desc.kind

    @property
    def impl(self) -> LayerKind:
        return KINDS[self.desc.kind]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}


@dataclass
class ForwardCache:
    batch_size: int
    layers: List[Dict[str, Any]]
    output_shape: Tuple[int, ...]


@dataclass
class PassCounter:
    forward: int = 0
    backward: int = 0


class ModelGraph:
    """Ordered stack of layers applied one after another."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], dtype=T.DEFAULT_DTYPE):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.dtype = np.dtype(dtype)
        self.counter = PassCounter()

    @classmethod
    def build(cls, descriptors: Sequence[LayerDescriptor], input_shape, seed: int = 0,
              dtype=T.DEFAULT_DTYPE, rng: Optional[T.RngStream] = None) -> "ModelGraph":
        rng = rng or T.RngStream("standard", seed)
        layers = []
        for i, d in enumerate(descriptors):
            d = LayerDescriptor(d.kind, dict(d.hyper))
            impl = KINDS.get(d.kind)
            if impl is not None:
                try:
                    impl.check(d.hyper)
                except ConfigError as e:
                    raise ConfigError(f"layer {i}: {e}") from None
                arrays = impl.init_params(d.hyper, rng, dtype)
            else:
                arrays = {}
            layers.append(Layer(d, {k: Parameter(f"{i}.{d.kind}.{k}", v) for k, v in arrays.items()}))
        return cls(layers, input_shape, dtype)

    # -- introspection ----------------------------------------------------

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer.params.values()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def descriptors(self) -> List[LayerDescriptor]:
        return [layer.desc for layer in self.layers]

    def shapes(self) -> List[Tuple[int, ...]]:
        """Per-sample output shape of every layer (raises naming the layer on mismatch)."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            impl = KINDS.get(layer.kind)
            if impl is None:
                raise DimensionError(f"layer {i}: unknown kind {layer.kind!r}")
            try:
                shape = tuple(impl.out_shape(layer.desc.hyper, shape))
            except DimensionError as e:
                raise DimensionError(f"layer {i} ({layer.kind}): {e}") from None
            out.append(shape)
        return out

    def copy(self, dtype=None) -> "ModelGraph":
        dtype = np.dtype(dtype or self.dtype)
        layers = [Layer(LayerDescriptor(l.desc.kind, dict(l.desc.hyper)),
                        {k: Parameter(p.name, p.data.astype(dtype, copy=True)) for k, p in l.params.items()})
                  for l in self.layers]
        return ModelGraph(layers, self.input_shape, dtype)

    def to_dict(self) -> Dict[str, Any]:
        return {"input_shape": list(self.input_shape), "layers": [d.to_dict() for d in self.descriptors()]}

    # -- passes -----------------------------------------------------------

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x)
        if x.ndim == 0 or tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(
                f"layer 0 ({self.layers[0].kind if self.layers else '-'}): input shape {x.shape} "
                f"does not match (b, {', '.join(map(str, self.input_shape))})")
        if x.dtype.kind == "f" and x.dtype != self.dtype:
            x = x.astype(self.dtype)
        self.counter.forward += 1
        caches = []
        for i, layer in enumerate(self.layers):
            impl = KINDS.get(layer.kind)
            if impl is None:
                raise LifecycleError(f"layer {i}: kind {layer.kind!r} has no forward implementation")
            try:
                impl.out_shape(layer.desc.hyper, tuple(x.shape[1:]))
            except DimensionError as e:
                raise DimensionError(f"layer {i} ({layer.kind}): {e}") from None
            x, cache = impl.forward(layer.desc.hyper, layer.arrays(), x)
            cache["out_shape"] = x.shape
            caches.append(cache)
        return x, ForwardCache(x.shape[0], caches, x.shape)

    def backward(self, grad_out: np.ndarray, cache: ForwardCache) -> List[np.ndarray]:
        """Propagate ``grad_out`` through every layer.

        Returns the highway gradients: entry ``l`` is the gradient with
        respect to the output of layer ``l``.
        """
        if cache is None or len(cache.layers) != len(self.layers):
            raise LifecycleError("backward called without a matching forward cache")
        self.counter.backward += 1
        highways: List[np.ndarray] = [None] * len(self.layers)  # type: ignore[list-item]
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            highways[i] = g
            if i > 0:
                g = backward_input(self.layers[i], g, cache.layers[i], index=i)
        return highways


def backward_input(layer: Layer, grad_out: np.ndarray, cache: Optional[Dict[str, Any]],
                   index: int = 0) -> np.ndarray:
    if not cache or "input" not in cache:
        raise LifecycleError(f"layer {index} ({layer.kind}): no forward cache")
    if grad_out.shape != cache["out_shape"]:
        raise DimensionError(f"layer {index} ({layer.kind}): grad_out shape {grad_out.shape} "
                             f"!= output shape {cache['out_shape']}")
    return layer.impl.backward_input(layer.desc.hyper, layer.arrays(), grad_out, cache)


def forward(model: ModelGraph, x: np.ndarray):
    return model.forward(x)


# ---------------------------------------------------------------------------
# losses


def loss_forward_backward(kind: str, logits: np.ndarray, targets: np.ndarray):
    """Per-sample losses and their gradients with respect to ``logits``.

    Gradients are those of each sample's own loss (sum reduction); the batch
    loss is the mean of the returned per-sample losses.
    """
    b = logits.shape[0]
    if kind == "mse":
        targets = np.asarray(targets, dtype=logits.dtype)
        if targets.shape != logits.shape:
            raise DimensionError(f"mse: targets {targets.shape} vs logits {logits.shape}")
        diff = (logits - targets).reshape(b, -1)
        k = diff.shape[1]
        loss = (diff ** 2).mean(axis=1)
        grad = (2.0 / k) * diff
        return loss, grad.reshape(logits.shape).astype(logits.dtype)
    if kind == "softmax_cross_entropy":
        if logits.ndim != 2:
            raise DimensionError(f"cross-entropy expects [b, k] logits, got {logits.shape}")
        t = np.asarray(targets)
        if t.shape != (b,):
            raise DimensionError(f"cross-entropy: targets {t.shape} vs batch {b}")
        if t.dtype.kind == "f" and not np.all(np.mod(t, 1) == 0):
            raise ParameterError("cross-entropy targets must be integer class indices")
        t = t.astype(np.int64)
        k = logits.shape[1]
        if b and (t.min() < 0 or t.max() >= k):
            raise ParameterError(f"cross-entropy target out of range [0, {k})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        rows = np.arange(b)
        loss = -log_p[rows, t]
        grad = np.exp(log_p)
        grad[rows, t] -= 1.0
        return loss, grad.astype(logits.dtype)
    raise ParameterError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# architecture files


def model_from_dict(doc: Dict[str, Any], seed: int = 0, dtype=T.DEFAULT_DTYPE) -> ModelGraph:
    unknown = set(doc) - {"input_shape", "layers", "loss"}
    if unknown:
        raise ConfigError(f"model file: unknown keys {sorted(unknown)}")
    if "input_shape" not in doc or "layers" not in doc:
        raise ConfigError("model file needs 'input_shape' and 'layers'")
    descs = [LayerDescriptor.from_dict(d) for d in doc["layers"]]
    return ModelGraph.build(descs, doc["input_shape"], seed=seed, dtype=dtype)


def load_model(path, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> ModelGraph:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return model_from_dict(doc, seed=seed, dtype=dtype)
