"""Memory model, layer micro-benchmarks and report emission.

Memory is counted in elements, not bytes from an allocator. With ``L``
trainable parameters and ``C_data`` elements of features + label + output
per sample, one forward/backward pass on ``b`` samples needs::

    non-private:  b*C_data + 2L          (parameters + one gradient)
    private:      b*C_data + (1 + b)L    (parameters + b per-sample gradients)
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ParameterError
from .grad_sample import grad_samples_from_pass, microbatch_oracle_pass, summed_param_grads
from .layers import LayerDescriptor, ModelGraph

# (L/C) / b below this is "L/C << b", above its inverse "L/C >> b"
REGIME_FACTOR = 10.0


@dataclass(frozen=True)
class MemoryEstimate:
    b: int
    L: int
    C_data: float
    M_nonDP: float
    M_DP: float
    ratio: float
    regime: str
    approx_ratio: float


def classify_regime(b: int, L: float, C_data: float) -> Tuple[str, float]:
    """Large-batch approximation of the private/non-private memory ratio."""
    if L == 0:
        return "L/C<<b", 1.0
    if C_data == 0:
        return "L/C>>b", (1 + b) / 2
    rel = (L / C_data) / b
    if rel < 1 / REGIME_FACTOR:
        return "L/C<<b", 1 + L / C_data
    if rel > REGIME_FACTOR:
        return "L/C>>b", (1 + b) / 2
    return "L/C~b", (2 + b) / 3


def predict_memory(b: int, L: int, C_data: float) -> MemoryEstimate:
    if b <= 0 or L < 0 or C_data < 0:
        raise ParameterError("need b > 0, L >= 0, C_data >= 0")
    if L == 0 and C_data == 0:
        raise ParameterError("L and C_data cannot both be zero")
    m_plain = b * C_data + 2 * L
    m_dp = b * C_data + (1 + b) * L
    regime, approx = classify_regime(b, L, C_data)
    return MemoryEstimate(b, L, C_data, m_plain, m_dp, m_dp / m_plain, regime, approx)


# ---------------------------------------------------------------------------
# reports


@dataclass
class Report:
    columns: List[str]
    rows: List[Tuple[Any, ...]] = field(default_factory=list)
    title: str = ""

    def add(self, *row) -> None:
        if len(row) != len(self.columns):
            raise ParameterError(f"row has {len(row)} fields, report has {len(self.columns)} columns")
        self.rows.append(tuple(row))

    def column(self, name: str) -> List[Any]:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


BENCH_COLUMNS = ["layer", "batch_size", "mode", "mean_step_time_s", "grad_sample_elements",
                 "storage_elements", "predicted_ratio", "measured_ratio"]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    return str(v)


def render(report: Report, fmt: str = "csv") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(report.columns)
        for r in report.rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(report.columns) + " |",
                 "|" + "|".join("---" for _ in report.columns) + "|"]
        lines += ["| " + " | ".join(_fmt(v) for v in r) + " |" for r in report.rows]
        head = f"### {report.title}\n\n" if report.title else ""
        return head + "\n".join(lines) + "\n"
    raise ParameterError(f"unknown report format {fmt!r}")


def emit_report(report: Report, fmt: str = "csv", path=None) -> str:
    text = render(report, fmt)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_report(path) -> Report:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return Report(rows[0], [tuple(r) for r in rows[1:]])


# ---------------------------------------------------------------------------
# micro-benchmarks


@dataclass
class LayerSpec:
    name: str
    descriptor: LayerDescriptor
    input_shape: Tuple[int, ...]
    integer_input: int = 0  # vocabulary size when the layer eats token ids

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "LayerSpec":
        d = dict(d)
        try:
            name = d.pop("name")
            shape = tuple(d.pop("input_shape"))
        except KeyError as e:
            raise ConfigError(f"layer spec missing {e}") from None
        desc = LayerDescriptor.from_dict(d)
        vocab = desc.hyper["num_embeddings"] if desc.kind == "embedding" else 0
        return cls(name, desc, shape, vocab)


PRESETS: Dict[str, LayerSpec] = {
    "linear": LayerSpec("linear", LayerDescriptor("linear", {"in_features": 64, "out_features": 64}), (64,)),
    "conv2d": LayerSpec("conv2d", LayerDescriptor("conv2d", {"in_channels": 3, "out_channels": 8,
                                                             "kernel_size": 3, "padding": 1}), (3, 16, 16)),
    "layer_norm": LayerSpec("layer_norm", LayerDescriptor("layer_norm", {"normalized_shape": [64]}), (8, 64)),
    "group_norm": LayerSpec("group_norm", LayerDescriptor("group_norm", {"num_groups": 4, "num_channels": 16}),
                            (16, 8, 8)),
    "instance_norm": LayerSpec("instance_norm", LayerDescriptor("instance_norm", {"num_features": 16,
                                                                                  "affine": True}), (16, 8, 8)),
    "embedding": LayerSpec("embedding", LayerDescriptor("embedding", {"num_embeddings": 1000,
                                                                      "embedding_dim": 16}), (8,), 1000),
}


def layer_sizes(spec: LayerSpec, model: Optional[ModelGraph] = None) -> Tuple[int, int]:
    """``(L, C_data)``: trainable parameters and per-sample feature + label + output elements.

    Labels are taken to be output-shaped.
    """
    model = model or ModelGraph.build([spec.descriptor], spec.input_shape)
    out = T.numel(model.shapes()[-1])
    return model.num_parameters(), T.numel(spec.input_shape) + 2 * out


def _batches(spec: LayerSpec, b: int, count: int, seed: int, dtype):
    rng = T.RngStream("standard", seed)
    n = T.numel(spec.input_shape)
    out = []
    for _ in range(count):
        if spec.integer_input:
            x = np.floor(rng.uniform(b * n) * spec.integer_input).astype(np.int64)
        else:
            x = rng.standard_normal(b * n).astype(dtype)
        out.append(x.reshape((b,) + spec.input_shape))
    return out


def _pass(model: ModelGraph, mode: str, x: np.ndarray):
    if mode == "microbatch":
        return microbatch_oracle_pass(model, x)
    y, cache = model.forward(x)
    highways = model.backward(np.ones_like(y, dtype=model.dtype), cache)
    if mode == "plain":
        return summed_param_grads(model, cache, highways)
    return grad_samples_from_pass(model, cache, highways).grads


MODES = ("plain", "vectorized", "microbatch")


def cmd_microbench(layers: Sequence[LayerSpec], batch_sizes: Sequence[int], repeats: int = 200,
                   num_batches: int = 10, warmup: int = 3, seed: int = 0,
                   modes: Sequence[str] = MODES, dtype=np.float32) -> Report:
    """Mean forward+backward time per mode; element counts measured from the produced arrays.

    The loss is the sum of the layer outputs, so the incoming gradient is all ones.
    """
    report = Report(list(BENCH_COLUMNS), title="per-sample gradient micro-benchmark")
    for spec in layers:
        model = ModelGraph.build([spec.descriptor], spec.input_shape, seed=seed, dtype=dtype)
        L, c_data = layer_sizes(spec, model)
        for b in batch_sizes:
            inputs = _batches(spec, b, num_batches, seed + b, dtype)
            est = predict_memory(b, L, c_data)
            plain_storage = None
            for mode in modes:
                for k in range(warmup):
                    _pass(model, mode, inputs[k % num_batches])
                start = time.perf_counter()
                for k in range(repeats):
                    grads = _pass(model, mode, inputs[k % num_batches])
                elapsed = (time.perf_counter() - start) / max(repeats, 1)
                grad_elems = sum(g.size for g in grads.values())
                # live storage: features + labels + output, parameters, gradients
                storage = b * c_data + L + grad_elems
                if mode == "plain":
                    plain_storage = storage
                    gs_elems = 0
                else:
                    gs_elems = grad_elems
                measured = storage / plain_storage if plain_storage else float("nan")
                report.add(spec.name, b, mode, elapsed, gs_elems, storage, est.ratio, measured)
    return report
