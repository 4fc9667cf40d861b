"""Random model factories and numeric oracles shared by the test modules."""

from __future__ import annotations

import math
import time

import numpy as np

from dpgrad.layers import LayerDescriptor as D
from dpgrad.layers import ModelGraph, loss_forward_backward

KINDS = ("linear", "embedding", "conv2d", "layer_norm", "group_norm", "instance_norm")


def rel_err(a, b) -> float:
    """Norm-wise relative error of ``a`` against reference ``b``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.linalg.norm(b)
    diff = np.linalg.norm(a - b)
    if denom == 0:
        return diff
    return diff / denom


def record_rel_err(rec_a, rec_b) -> float:
    """Relative error over every per-sample gradient of the two records, concatenated."""
    a = np.concatenate([rec_a[k].ravel() for k in rec_b])
    b = np.concatenate([rec_b[k].ravel() for k in rec_b])
    return rel_err(a, b)


def _perturb_affine(model: ModelGraph, rng: np.random.Generator) -> None:
    # norm layers start at gamma=1, beta=0; randomise so their gradients are informative
    for layer in model.layers:
        if layer.kind in ("layer_norm", "group_norm", "instance_norm"):
            for p in layer.params.values():
                p.data = (p.data + rng.normal(scale=0.5, size=p.shape)).astype(p.data.dtype)


def random_instance(kind: str, rng: np.random.Generator, dtype=np.float64, b: int | None = None,
                    loss: str | None = None):
    """A small random model exercising ``kind``, plus a batch and targets.

    Returns ``(model, x, targets, loss_kind)``.
    """
    b = b if b is not None else int(rng.integers(1, 17))
    k = int(rng.integers(2, 5))
    loss = loss or ("softmax_cross_entropy" if rng.random() < 0.5 else "mse")
    if kind == "linear":
        d, h = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        if rng.random() < 0.5:
            shape = (d,)
            descs = [D("linear", {"in_features": d, "out_features": h}), D("relu"),
                     D("linear", {"in_features": h, "out_features": k, "bias": bool(rng.random() < 0.7)})]
        else:  # middle dims exercise the n...i contraction
            t = int(rng.integers(2, 4))
            shape = (t, d)
            descs = [D("linear", {"in_features": d, "out_features": h}), D("relu"), D("flatten"),
                     D("linear", {"in_features": t * h, "out_features": k})]
        x = rng.normal(size=(b,) + shape)
    elif kind == "embedding":
        vocab, dim, t = int(rng.integers(2, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        shape = (t,)
        descs = [D("embedding", {"num_embeddings": vocab, "embedding_dim": dim}), D("flatten"),
                 D("linear", {"in_features": t * dim, "out_features": k})]
        x = rng.integers(0, vocab, size=(b, t))
    elif kind == "conv2d":
        c, o = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        hgt, wid = kh + int(rng.integers(0, 4)), kw + int(rng.integers(0, 4))
        oh, ow = (hgt + 2 * pad - kh) // stride + 1, (wid + 2 * pad - kw) // stride + 1
        shape = (c, hgt, wid)
        descs = [D("conv2d", {"in_channels": c, "out_channels": o, "kernel_size": [kh, kw],
                              "stride": stride, "padding": pad}), D("relu"), D("flatten"),
                 D("linear", {"in_features": o * oh * ow, "out_features": k})]
        x = rng.normal(size=(b,) + shape)
    elif kind == "layer_norm":
        t, d = int(rng.integers(1, 4)), int(rng.integers(2, 6))
        shape = (t, d)
        ns = [d] if rng.random() < 0.5 else [t, d]
        descs = [D("linear", {"in_features": d, "out_features": d}), D("layer_norm", {"normalized_shape": ns}),
                 D("flatten"), D("linear", {"in_features": t * d, "out_features": k})]
        x = rng.normal(size=(b,) + shape)
    elif kind in ("group_norm", "instance_norm"):
        g = int(rng.integers(1, 4))
        c = g * int(rng.integers(1, 3))
        hgt, wid = int(rng.integers(1, 4)), int(rng.integers(2, 4))
        shape = (c, hgt, wid)
        if kind == "group_norm":
            norm = D("group_norm", {"num_groups": g, "num_channels": c})
        else:
            norm = D("instance_norm", {"num_features": c, "affine": True})
        descs = [D("conv2d", {"in_channels": c, "out_channels": c, "kernel_size": 1}), norm,
                 D("flatten"), D("linear", {"in_features": c * hgt * wid, "out_features": k})]
        x = rng.normal(size=(b,) + shape)
    else:
        raise ValueError(kind)
    model = ModelGraph.build(descs, shape, seed=int(rng.integers(0, 2**31)), dtype=dtype)
    _perturb_affine(model, rng)
    if kind != "embedding":
        x = x.astype(dtype)
    if loss == "mse":
        targets = rng.normal(size=(b, k)).astype(dtype)
    else:
        targets = rng.integers(0, k, size=b)
    return model, x, targets, loss


def batch_loss(model: ModelGraph, x, targets, loss_kind) -> float:
    out, _ = model.forward(x)
    losses, _ = loss_forward_backward(loss_kind, out, targets)
    return float(np.mean(losses))


def fd_param_grads(model: ModelGraph, x, targets, loss_kind, h: float = 1e-6, max_coords: int = 400,
                   rng: np.random.Generator | None = None):
    """Central differences of the mean batch loss for (a subset of) parameter coordinates.

    Returns ``{name: (flat_indices, fd_values)}``.
    """
    out = {}
    for p in model.parameters():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if rng is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, max_coords, replace=False))
        vals = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = batch_loss(model, x, targets, loss_kind)
            flat[i] = orig - h
            down = batch_loss(model, x, targets, loss_kind)
            flat[i] = orig
            vals[n] = (up - down) / (2 * h)
        out[p.name] = (idx, vals)
    return out


def fd_input_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``x``."""
    x = x.astype(np.float64, copy=True)
    g = np.empty_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def isolated_layer(kind: str, rng: np.random.Generator, dtype=np.float64):
    """A one-layer model of ``kind`` and a random input batch, for input-gradient checks."""
    b = int(rng.integers(1, 5))
    if kind == "linear":
        d, r = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        shape, desc = (int(rng.integers(1, 3)), d), D("linear", {"in_features": d, "out_features": r})
    elif kind == "embedding":
        vocab = int(rng.integers(2, 7))
        shape, desc = (3,), D("embedding", {"num_embeddings": vocab, "embedding_dim": 2})
        model = ModelGraph.build([desc], shape, seed=int(rng.integers(0, 2**31)), dtype=dtype)
        return model, rng.integers(0, vocab, size=(b,) + shape)
    elif kind == "conv2d":
        c = int(rng.integers(1, 3))
        shape = (c, int(rng.integers(3, 6)), int(rng.integers(3, 6)))
        desc = D("conv2d", {"in_channels": c, "out_channels": int(rng.integers(1, 3)),
                            "kernel_size": int(rng.integers(1, 4)), "stride": int(rng.integers(1, 3)),
                            "padding": int(rng.integers(0, 2))})
    elif kind == "layer_norm":
        shape = (2, int(rng.integers(2, 6)))
        desc = D("layer_norm", {"normalized_shape": [shape[-1]]})
    elif kind == "group_norm":
        shape, desc = (4, 2, 3), D("group_norm", {"num_groups": int(rng.choice([1, 2, 4])), "num_channels": 4})
    elif kind == "instance_norm":
        shape, desc = (3, 2, 3), D("instance_norm", {"num_features": 3, "affine": bool(rng.random() < 0.5)})
    elif kind == "relu":
        shape, desc = (5,), D("relu")
    elif kind == "flatten":
        shape, desc = (2, 3), D("flatten")
    else:
        raise ValueError(kind)
    model = ModelGraph.build([desc], shape, seed=int(rng.integers(0, 2**31)), dtype=dtype)
    _perturb_affine(model, rng)
    return model, rng.normal(size=(b,) + shape).astype(dtype)


def naive_conv2d(x, w, bias, stride, pad):
    """Direct nested-loop cross-correlation, float64."""
    b, c, hgt, wid = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((b, c, hgt + 2 * pad, wid + 2 * pad))
    xp[:, :, pad:pad + hgt, pad:pad + wid] = x
    oh, ow = (hgt + 2 * pad - kh) // stride + 1, (wid + 2 * pad - kw) // stride + 1
    out = np.zeros((b, o, oh, ow))
    for n in range(b):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if bias is None else float(bias[f])
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, ch, i * stride + u, j * stride + v] * w[f, ch, u, v]
                    out[n, f, i, j] = acc
    return out


def kahan_sum(values) -> float:
    total, comp = 0.0, 0.0
    for v in values:
        y = float(v) - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def l2_oracle(values) -> float:
    return math.sqrt(kahan_sum(float(v) * float(v) for v in np.ravel(values)))


# ---------------------------------------------------------------------------
# acceptance bookkeeping: one PASS/FAIL line per criterion

ACCEPTANCE_LINES: list = []


class criterion:
    """Times a criterion body, records a PASS/FAIL line and enforces the runtime budget."""

    def __init__(self, number: int, title: str, limit_s: float):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.notes: list = []

    def note(self, text: str) -> None:
        self.notes.append(text)

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def _emit(self, status: str, detail: str) -> None:
        line = f"{status} criterion {self.number} {self.title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self._t0
        if exc_type is not None:
            msg = str(exc).strip().splitlines()[0] if str(exc).strip() else exc_type.__name__
            self._emit("FAIL", f"{msg} ({elapsed:.1f}s)")
            return False
        notes = "; ".join(self.notes)
        if elapsed > self.limit_s:
            self._emit("FAIL", f"runtime {elapsed:.1f}s exceeds {self.limit_s:.0f}s; {notes}")
            raise AssertionError(f"criterion {self.number} took {elapsed:.1f}s > {self.limit_s}s")
        self._emit("PASS", f"{notes} ({elapsed:.1f}s, limit {self.limit_s:.0f}s)")
        return False
