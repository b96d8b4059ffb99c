"""Seeded toy datasets and mini-batch samplers."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .nn import Batch

KINDS = ("gaussian-mixture", "two-spirals")
MODES = ("shuffle-epoch", "iid-with-replacement")


@dataclass(frozen=True)
class ToyDatasetSpec:
    kind: str = "gaussian-mixture"
    n_classes: int = 4
    n_train: int = 2000
    n_test: int = 2000
    input_dim: int = 2
    noise_sigma: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"dataset kind must be one of {KINDS}, got {self.kind!r}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.n_train < self.n_classes or self.n_test < self.n_classes:
            raise ValueError(
                f"n_train={self.n_train} and n_test={self.n_test} must be >= n_classes={self.n_classes}")
        if not self.noise_sigma > 0:
            raise ValueError(f"noise_sigma must be positive, got {self.noise_sigma}")
        if self.input_dim < 1 or (self.kind == "two-spirals" and self.input_dim < 2):
            raise ValueError(f"input_dim {self.input_dim} too small for {self.kind}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ToyDataset:
    spec: ToyDatasetSpec
    train: Batch
    test: Batch


def class_centroids(n_classes: int, input_dim: int) -> np.ndarray:
    """Unit-circle centroids in the first two coordinates (a line for 1-D)."""
    c = np.zeros((n_classes, input_dim))
    if input_dim == 1:
        c[:, 0] = np.linspace(-1.0, 1.0, n_classes)
    else:
        ang = 2.0 * np.pi * np.arange(n_classes) / n_classes
        c[:, 0], c[:, 1] = np.cos(ang), np.sin(ang)
    return c


def _labels(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % k).astype(np.int64)


def _draw(spec: ToyDatasetSpec, rng: np.random.Generator, n: int) -> Batch:
    y = _labels(rng, n, spec.n_classes)
    noise = rng.normal(0.0, spec.noise_sigma, size=(n, spec.input_dim))
    if spec.kind == "gaussian-mixture":
        x = class_centroids(spec.n_classes, spec.input_dim)[y] + noise
    else:
        t = rng.uniform(0.05, 1.0, size=n)
        ang = 3.0 * np.pi * t + 2.0 * np.pi * y / spec.n_classes
        x = noise
        x[:, 0] += t * np.cos(ang)
        x[:, 1] += t * np.sin(ang)
    return Batch(x, y)


def generate(spec: ToyDatasetSpec) -> ToyDataset:
    """Draw independent train and test splits from the same distribution."""
    spec.validate()
    train_seq, test_seq = np.random.SeedSequence(spec.seed).spawn(2)
    train = _draw(spec, np.random.default_rng(train_seq), spec.n_train)
    test = _draw(spec, np.random.default_rng(test_seq), spec.n_test)
    return ToyDataset(spec, train, test)


class SamplerExhausted(RuntimeError):
    pass


class BatchSampler:
    """Seeded mini-batch sampler over one dataset split.

    In ``shuffle-epoch`` mode each epoch is a fresh permutation and the last
    batch may be short; call :meth:`reset` to start the next epoch.
    """

    def __init__(self, data: Batch, batch_size: int, seed: int = 0,
                 mode: str = "iid-with-replacement"):
        if mode not in MODES:
            raise ValueError(f"sampler mode must be one of {MODES}, got {mode!r}")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.data = data
        self.batch_size = int(batch_size)
        self.seed = seed
        self.mode = mode
        self._rng = np.random.default_rng(seed)
        self._perm: np.ndarray | None = None
        self._cursor = 0
        if mode == "shuffle-epoch":
            self.reset()

    def reset(self) -> None:
        self._perm = self._rng.permutation(len(self.data))
        self._cursor = 0

    def batches_per_epoch(self) -> int:
        return -(-len(self.data) // self.batch_size)

    def next_batch(self) -> Batch:
        n = len(self.data)
        if self.mode == "iid-with-replacement":
            return self.data.take(self._rng.integers(0, n, size=self.batch_size))
        if self._cursor >= n:
            raise SamplerExhausted("epoch exhausted; call reset() to start a new one")
        idx = self._perm[self._cursor:self._cursor + self.batch_size]
        self._cursor += len(idx)
        return self.data.take(idx)

    def epoch(self) -> Iterator[Batch]:
        """Reset, then yield the batches of one full shuffled pass."""
        if self.mode != "shuffle-epoch":
            raise ValueError("epoch() requires shuffle-epoch mode")
        self.reset()
        while self._cursor < len(self.data):
            yield self.next_batch()


def export_csv(batch: Batch, path) -> Path:
    """One sample per row: ``x0,...,x{d-1},label`` with 17 significant digits."""
    path = Path(path)
    d = batch.inputs.shape[1]
    header = ",".join([f"x{i}" for i in range(d)] + ["label"])
    with path.open("w") as fh:
        fh.write(header + "\n")
        for x, y in zip(batch.inputs, batch.targets):
            fh.write(",".join(format(v, ".17g") for v in x) + f",{int(y)}\n")
    return path


def import_csv(path) -> Batch:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Batch(arr[:, :-1], arr[:, -1].astype(np.int64))
