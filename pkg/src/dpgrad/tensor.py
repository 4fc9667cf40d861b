"""Dense tensor helpers and random streams.

Tensors are plain row-major ``numpy.ndarray`` values. Training runs in
float32; float64 is used by the test oracles. The functions here add the
shape contracts the rest of the package relies on (no silent broadcasting).
"""

from __future__ import annotations

import os
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, ParameterError

DEFAULT_DTYPE = np.float32

Tensor = np.ndarray


class RngStream:
    """Single-owner source of uniform and Gaussian draws.

    ``kind="standard"`` is a seeded PCG64 stream that replays exactly.
    ``kind="secure"`` pulls bytes from the OS CSPRNG and refuses a seed.
    Both feed the same Box-Muller transform, so switching kind changes only
    where the uniforms come from.
    """

    def __init__(self, kind: str = "standard", seed: Optional[int] = None):
        if kind not in ("standard", "secure"):
            raise ParameterError(f"unknown rng kind {kind!r}")
        self.kind = kind
        if kind == "secure":
            if seed is not None:
                raise ParameterError("secure streams draw from OS entropy and cannot be seeded")
            self._gen = None
        else:
            if seed is None:
                seed = 0
            self._gen = np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))
        self.seed = seed

    @classmethod
    def secure(cls) -> "RngStream":
        return cls("secure")

    def uniform(self, size: int) -> np.ndarray:
        """``size`` float64 draws in [0, 1)."""
        if self._gen is not None:
            return self._gen.random(size)
        raw = np.frombuffer(os.urandom(8 * size), dtype=np.uint64)
        return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def standard_normal(self, size: int) -> np.ndarray:
        pairs = (size + 1) // 2
        u1 = 1.0 - self.uniform(pairs)  # (0, 1], keeps log finite
        u2 = self.uniform(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:size]

    def permutation(self, n: int) -> np.ndarray:
        # ranks of i.i.d. uniforms; stable sort keeps it replayable
        return np.argsort(self.uniform(n), kind="stable")


def as_tensor(values, dtype=DEFAULT_DTYPE) -> Tensor:
    return np.ascontiguousarray(np.asarray(values, dtype=dtype))


def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE) -> Tensor:
    return np.zeros(tuple(shape), dtype=dtype)


def numel(shape: Sequence[int]) -> int:
    n = 1
    for s in shape:
        n *= int(s)
    return n


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def batched_outer(b_grads: Tensor, acts: Tensor) -> Tensor:
    """Contract ``n...i, n...j -> nij``.

    For each leading index, sum the outer products of the trailing vectors
    over every middle position. Implemented as a batched ``B^T A`` product
    after folding the middle dims.
    """
    if b_grads.ndim < 2 or acts.ndim < 2:
        raise DimensionError(
            f"batched_outer: need at least 2 dims, got {b_grads.shape} and {acts.shape}"
        )
    if b_grads.shape[:-1] != acts.shape[:-1]:
        raise DimensionError(
            f"batched_outer: leading/middle dims differ: {b_grads.shape} vs {acts.shape}"
        )
    n, i, j = b_grads.shape[0], b_grads.shape[-1], acts.shape[-1]
    bg = b_grads.reshape(n, -1, i)
    ac = acts.reshape(n, -1, j)
    return np.matmul(bg.transpose(0, 2, 1), ac)


def gaussian(shape: Sequence[int], std: float, rng: RngStream, dtype=DEFAULT_DTYPE) -> Tensor:
    if std < 0 or not np.isfinite(std):
        raise ParameterError(f"gaussian: std must be finite and >= 0, got {std}")
    shape = tuple(int(s) for s in shape)
    if std == 0:
        return np.zeros(shape, dtype=dtype)
    return (std * rng.standard_normal(numel(shape))).astype(dtype).reshape(shape)


def l2_norm(t: Tensor) -> float:
    flat = np.asarray(t, dtype=np.float64).ravel()
    return float(np.sqrt(np.dot(flat, flat)))


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return a - b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return a * b


def scale(a: Tensor, factor: float) -> Tensor:
    return a * a.dtype.type(factor)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    return np.sum(a, axis=axis)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    return np.mean(a, axis=axis)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if numel(shape) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} ({a.size} elements) as {shape}")
    return a.reshape(shape)


def slice_leading(a: Tensor, start: int, stop: Optional[int] = None) -> Tensor:
    """Rows ``start:stop`` along the leading axis (a single row if ``stop`` is None, kept 1-long)."""
    if a.ndim == 0:
        raise DimensionError("slice_leading: scalar has no leading axis")
    if stop is None:
        stop = start + 1
    if not (0 <= start <= stop <= a.shape[0]):
        raise DimensionError(f"slice_leading: [{start}:{stop}] out of range for extent {a.shape[0]}")
    return a[start:stop]
