"""
Synthetic Gaussian-mixture worlds, CSV ingestion, and [0,1] <-> [-1,1] normalization.

A world draws class means uniformly from [0.2, 0.8]^d and samples
``x = clamp(mu_c + gamma * z, 0, 1)``. Its Bayes classifier and posterior-mean
denoiser are known in closed form (ignoring the small clamping truncation).
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError, DomainError


class Sample(NamedTuple):
    x: np.ndarray
    label: int


@dataclass(frozen=True)
class GmmWorld:
    means: np.ndarray  # (K, d) in [0, 1] input space
    gamma: float
    priors: np.ndarray
    seed: int | None = None

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def pairwise_distances(self) -> np.ndarray:
        diff = self.means[:, None, :] - self.means[None, :, :]
        return np.sqrt((diff ** 2).sum(-1))

    def min_distance(self) -> float:
        dist = self.pairwise_distances()
        return float(dist[~np.eye(self.K, dtype=bool)].min())

    def in_model_space(self) -> "GmmWorld":
        """The same world seen through :func:`normalize` (means 2mu-1, std 2gamma)."""
        return GmmWorld(normalize(self.means), 2.0 * self.gamma, self.priors, self.seed)

    def sample_class(self, c: int, rng: np.random.Generator) -> np.ndarray:
        if not 0 <= c < self.K:
            raise ValueError(f"unknown class {c}")
        return np.clip(self.means[c] + self.gamma * rng.standard_normal(self.d), 0.0, 1.0)

    def to_text(self) -> str:
        lines = [f"K = {self.K}", f"d = {self.d}", f"gamma = {self.gamma!r}",
                 f"seed = {self.seed}",
                 "priors = " + ",".join(repr(float(p)) for p in self.priors)]
        lines += [f"mean.{c} = " + ",".join(repr(float(v)) for v in mu) for c, mu in enumerate(self.means)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GmmWorld":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
        K = int(kv["K"])
        means = np.array([[float(v) for v in kv[f"mean.{c}"].split(",")] for c in range(K)])
        priors = np.array([float(v) for v in kv["priors"].split(",")])
        seed = None if kv.get("seed", "None") == "None" else int(kv["seed"])
        return cls(means, float(kv["gamma"]), priors, seed)


@dataclass
class Dataset:
    X: np.ndarray  # (N, d) in [0, 1]
    y: np.ndarray  # (N,) integer labels
    split: str = "eval"

    def __len__(self) -> int:
        return self.X.shape[0]

    def __iter__(self):
        for x, label in zip(self.X, self.y):
            yield Sample(x, int(label))

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self) else 0


def make_gmm_world(K: int, d: int, gamma: float, seed: int, max_attempts: int = 1000) -> GmmWorld:
    """Draw well-separated class means (pairwise distance >= 4 gamma) by rejection."""
    if K < 2 or d < 1:
        raise DomainError(f"need K >= 2 and d >= 1, got K={K}, d={d}")
    if not gamma > 0:
        raise DomainError(f"gamma must be positive, got {gamma!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    for _ in range(max_attempts):
        means = rng.uniform(0.2, 0.8, size=(K, d))
        dist = min(np.linalg.norm(a - b) for a, b in itertools.combinations(means, 2))
        if dist >= 4.0 * gamma:
            return GmmWorld(means, float(gamma), np.full(K, 1.0 / K), int(seed))
    raise ConfigError(f"could not place {K} means {4 * gamma:g} apart in d={d} after {max_attempts} draws")


_SPLITS = {"train": 1, "eval": 2, "reference": 3}


def sample_dataset(world: GmmWorld, n_per_class: int, seed: int, split: str = "eval") -> Dataset:
    """
    ``n_per_class`` clamped samples per class, interleaved by class.

    Sample j of class c draws from its own stream keyed by (seed, split, c, j).
    """
    if n_per_class < 1:
        raise DomainError("n_per_class must be at least 1")
    X, y = [], []
    for c in range(world.K):
        for j in range(n_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), _SPLITS[split], c, j]))
            X.append(world.sample_class(c, rng))
            y.append(c)
    X, y = np.array(X), np.array(y, dtype=np.int64)
    order = np.arange(len(y)).reshape(world.K, n_per_class).T.ravel()
    return Dataset(X[order], y[order], split)


def normalize(x):
    """[0, 1] input space to [-1, 1] model space (mean 0.5, std 0.5)."""
    return 2.0 * np.asarray(x, dtype=np.float64) - 1.0


def denormalize(x):
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def load_csv_dataset(path, split: str = "eval") -> Dataset:
    """Rows of ``label,x1,...,xd`` with features in [0, 1]."""
    X, y = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                label = int(row[0])
                feats = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed row ({exc})") from None
            if not feats:
                raise DataError(f"{path}:{lineno}: row has no features")
            if X and len(feats) != len(X[0]):
                raise DataError(f"{path}:{lineno}: expected {len(X[0])} features, got {len(feats)}")
            if label < 0:
                raise DataError(f"{path}:{lineno}: negative label {label}")
            bad = [v for v in feats if not (0.0 <= v <= 1.0) or math.isnan(v)]
            if bad:
                raise DataError(f"{path}:{lineno}: feature {bad[0]!r} outside [0, 1]")
            X.append(feats)
            y.append(label)
    if not X:
        raise DataError(f"{path}: no samples")
    return Dataset(np.array(X), np.array(y, dtype=np.int64), split)


def save_csv_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for x, label in zip(dataset.X, dataset.y):
            writer.writerow([int(label)] + [repr(float(v)) for v in x])


def write_world(world: GmmWorld, path) -> None:
    Path(path).write_text(world.to_text())


def read_world(path) -> GmmWorld:
    return GmmWorld.from_text(Path(path).read_text())
