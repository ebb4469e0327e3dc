"""Synthetic datasets and their distribution across users."""

from __future__ import annotations

import csv
import math
import os
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hflsim.errors import DegenerateSplit, MoreUsersThanSamples

CLASS_MEAN_DISTANCE = 2.0


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"features {x.shape} and labels {y.shape} do not line up")
        if x.shape[0] < 1:
            raise ValueError("a dataset needs at least one row")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain non-finite values")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, rows: Sequence[int] | np.ndarray) -> Dataset:
        idx = np.asarray(rows, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.n_classes == other.n_classes
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


Partition = dict[int, list[int]]


def class_means(c: int, d: int) -> np.ndarray:
    """Class k sits on axis (k // 2) mod d, on the positive side for even k."""
    means = np.zeros((c, d))
    for k in range(c):
        means[k, (k // 2) % d] = CLASS_MEAN_DISTANCE if k % 2 == 0 else -CLASS_MEAN_DISTANCE
    return means


def gen_blobs(c: int, d: int, n_per_class: int, spread: float, seed: int) -> Dataset:
    """One isotropic Gaussian blob per class, rows grouped by class."""
    if c < 2 or d < 1 or n_per_class < 1:
        raise ValueError(f"invalid sizes c={c}, d={d}, n_per_class={n_per_class}")
    if spread < 0 or not math.isfinite(spread):
        raise ValueError(f"spread must be a non-negative real, got {spread}")
    rng = np.random.default_rng(seed)
    means = class_means(c, d)
    noise = rng.standard_normal((c * n_per_class, d))
    x = np.repeat(means, n_per_class, axis=0) + spread * noise
    y = np.repeat(np.arange(c), n_per_class)
    return Dataset(x, y, c)


def partition_iid(ds: Dataset, users: Sequence[int], seed: int) -> Partition:
    users = list(users)
    if len(users) > ds.n:
        raise MoreUsersThanSamples(f"{len(users)} users but only {ds.n} samples")
    perm = np.random.default_rng(seed).permutation(ds.n)
    return {u: sorted(chunk.tolist()) for u, chunk in zip(users, np.array_split(perm, len(users)))}


def largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``; leftovers go to the largest fractions, lower index first."""
    raw = shares * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_label_skew(ds: Dataset, users: Sequence[int], alpha: float, seed: int) -> Partition:
    """Per-class Dirichlet(alpha) shares across users.

    Users can end up with no rows when ``alpha`` is small.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    users = list(users)
    rng = np.random.default_rng(seed)
    out: Partition = {u: [] for u in users}
    for c in range(ds.n_classes):
        rows = np.flatnonzero(ds.labels == c)
        if rows.size == 0:
            continue
        rows = rng.permutation(rows)
        shares = rng.dirichlet(np.full(len(users), float(alpha)))
        counts = largest_remainder(shares, rows.size)
        start = 0
        for u, k in zip(users, counts):
            out[u].extend(rows[start:start + k].tolist())
            start += k
    return {u: sorted(v) for u, v in out.items()}


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffle, then take floor(test_fraction * n) rows for test and the rest for train."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = math.floor(test_fraction * ds.n)
    if n_test < 1 or n_test > ds.n - 1:
        raise DegenerateSplit(f"n={ds.n} with test_fraction={test_fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(ds.n)
    return ds.subset(perm[n_test:]), ds.subset(perm[:n_test])


def save_csv(ds: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(ds.d)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path: str | os.PathLike, n_classes: int | None = None) -> Dataset:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValueError("dataset CSV must end with a 'label' column")
        rows = [r for r in reader if r]
    x = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64).reshape(len(rows), len(header) - 1)
    y = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    return Dataset(x, y, n_classes if n_classes is not None else int(y.max()) + 1)
