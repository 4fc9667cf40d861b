"""Datasets, Poisson and uniform batch samplers, CSV/IDX ingestion."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import IngestionError, ParameterError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.features) != len(self.targets):
            raise IngestionError(
                f"features have {len(self.features)} rows but targets have {len(self.targets)}")

    def __len__(self) -> int:
        return len(self.features)

    def take(self, indices) -> Tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        return self.features[idx], self.targets[idx]


class PoissonSampler:
    """Each index joins a batch independently with probability ``sample_rate``.

    Batches may be empty; they are returned as-is so the sampling
    distribution the accountant assumes is preserved.
    """

    def __init__(self, num_samples: int, sample_rate: float, rng: Optional[T.RngStream] = None):
        if not (0.0 < sample_rate <= 1.0):
            raise ParameterError(f"sample_rate must lie in (0, 1], got {sample_rate}")
        if num_samples < 0:
            raise ParameterError("num_samples must be non-negative")
        self.num_samples = int(num_samples)
        self.sample_rate = float(sample_rate)
        self.rng = rng or T.RngStream("standard", 0)

    def next_batch(self) -> np.ndarray:
        if self.sample_rate == 1.0:
            return np.arange(self.num_samples)
        u = self.rng.uniform(self.num_samples)
        return np.flatnonzero(u < self.sample_rate)

    def steps_per_epoch(self) -> int:
        return max(1, round(1.0 / self.sample_rate))


def next_batch(sampler: PoissonSampler) -> np.ndarray:
    return sampler.next_batch()


class PoissonLoader:
    """Iterates ``(features, targets)`` Poisson batches; one pass is ``round(1/q)`` batches.

    ``sample_rate`` may be changed between epochs to vary the batch size.
    """

    def __init__(self, dataset: Dataset, sample_rate: float, rng: Optional[T.RngStream] = None,
                 steps: Optional[int] = None):
        self.dataset = dataset
        self.sampler = PoissonSampler(len(dataset), sample_rate, rng)
        self.steps = steps

    @property
    def sample_rate(self) -> float:
        return self.sampler.sample_rate

    @sample_rate.setter
    def sample_rate(self, q: float) -> None:
        self.sampler = PoissonSampler(len(self.dataset), q, self.sampler.rng)

    @property
    def expected_batch_size(self) -> float:
        return self.sample_rate * len(self.dataset)

    def __len__(self) -> int:
        return self.steps or self.sampler.steps_per_epoch()

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for _ in range(len(self)):
            yield self.dataset.take(self.sampler.next_batch())


def uniform_batches(num_samples: int, batch_size: int, shuffle_seed: Optional[int] = 0,
                    rng: Optional[T.RngStream] = None) -> List[np.ndarray]:
    """A shuffled permutation cut into ``ceil(N / batch_size)`` batches (last may be short)."""
    if batch_size <= 0:
        raise ParameterError("batch_size must be positive")
    if rng is None:
        rng = T.RngStream("standard", shuffle_seed)
    perm = rng.permutation(num_samples)
    return [perm[i:i + batch_size] for i in range(0, num_samples, batch_size)]


def make_blobs(num_samples: int = 2000, num_features: int = 2, num_classes: int = 2,
               spread: float = 1.0, separation: float = 3.0, seed: int = 0) -> Dataset:
    """Gaussian blobs whose centres sit evenly on a circle of radius ``separation``."""
    if num_features < 2:
        raise ParameterError("make_blobs needs at least 2 features")
    rng = T.RngStream("standard", seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    centres = np.zeros((num_classes, num_features))
    centres[:, 0], centres[:, 1] = separation * np.cos(angles), separation * np.sin(angles)
    labels = np.arange(num_samples) % num_classes
    noise = spread * rng.standard_normal(num_samples * num_features).reshape(num_samples, num_features)
    feats = (centres[labels] + noise).astype(np.float32)
    return Dataset(feats, labels.astype(np.int64))


def load_csv(path, feature_columns: Optional[Sequence[str]] = None,
             target_column: Optional[str] = None, dtype=np.float32) -> Dataset:
    """Read a header-first CSV. Defaults: last column is the target, the rest features."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        if target_column is None:
            target_column = header[-1]
        if feature_columns is None:
            feature_columns = [h for h in header if h != target_column]
        try:
            f_idx = [header.index(c) for c in feature_columns]
            t_idx = header.index(target_column)
        except ValueError as e:
            raise IngestionError(f"{path}: column not found ({e})") from None
        feats, targets = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                feats.append([float(row[i]) for i in f_idx])
                targets.append(float(row[t_idx]))
            except ValueError as e:
                raise IngestionError(f"{path}:{line_no}: {e}") from None
    t = np.asarray(targets)
    if t.size and np.all(np.mod(t, 1) == 0):
        t = t.astype(np.int64)
    return Dataset(np.asarray(feats, dtype=dtype).reshape(len(feats), len(f_idx)), t)


def _read_idx(path: Path, magic: int, ndims: int) -> np.ndarray:
    raw = path.read_bytes()
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise IngestionError(f"{path}: truncated header ({len(raw)} bytes, need {header})")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IngestionError(f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    need = math.prod(dims)
    if len(raw) - header != need:
        raise IngestionError(f"{path}: payload at offset {header} has {len(raw) - header} bytes, "
                             f"header promises {need}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, dtype=np.float32) -> Dataset:
    """MNIST-style IDX pair; pixels scaled to [0, 1], images kept as [N, 1, rows, cols]."""
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IngestionError(f"{images_path} has {len(images)} images, {labels_path} has {len(labels)} labels")
    feats = (images.astype(dtype) / dtype(255.0))[:, None, :, :]
    return Dataset(np.ascontiguousarray(feats), labels.astype(np.int64))

