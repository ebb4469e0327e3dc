"""Softmax regression and a one-hidden-layer MLP on flat parameter vectors.

Parameter layout (row-major blocks, in order):

* ``logreg``: W (C x d), b (C)
* ``mlp1``:   W1 (h x d), b1 (h), W2 (C x h), b2 (C); tanh hidden units
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, replace

import numpy as np

from hflsim.errors import DimensionMismatch, EmptyShard


class ArchKind(str, enum.Enum):
    LOGREG = "logreg"
    MLP1 = "mlp1"


@dataclass(frozen=True)
class Arch:
    kind: ArchKind
    d: int
    C: int
    h: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ArchKind(self.kind))
        if self.d < 1 or self.C < 2:
            raise ValueError(f"need d >= 1 and C >= 2, got d={self.d}, C={self.C}")
        if self.kind is ArchKind.MLP1 and self.h < 1:
            raise ValueError("an mlp1 needs a positive hidden width")

    @property
    def size(self) -> int:
        if self.kind is ArchKind.LOGREG:
            return self.C * self.d + self.C
        return self.h * self.d + self.h + self.C * self.h + self.C


@dataclass(frozen=True, eq=False)
class ModelParams:
    values: np.ndarray
    arch: Arch

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.arch.size,):
            raise DimensionMismatch(f"expected {self.arch.size} parameters, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "values", v)

    def with_values(self, values: np.ndarray) -> ModelParams:
        return ModelParams(values, self.arch)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.1
    local_epochs: int = 1
    batch_size: int = 8

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be positive")

    def overridden(self, **kw) -> Hyperparams:
        return replace(self, **kw)


def init_params(arch: Arch, seed: int) -> ModelParams:
    if arch.kind is ArchKind.LOGREG:
        return ModelParams(np.zeros(arch.size), arch)
    bound = 1.0 / np.sqrt(arch.d)
    rng = np.random.default_rng(seed)
    return ModelParams(rng.uniform(-bound, bound, arch.size), arch)


def unpack(p: ModelParams) -> tuple[np.ndarray, ...]:
    """Views onto the weight blocks of ``p``."""
    a, v = p.arch, p.values
    if a.kind is ArchKind.LOGREG:
        return v[: a.C * a.d].reshape(a.C, a.d), v[a.C * a.d:]
    o1 = a.h * a.d
    o2 = o1 + a.h
    o3 = o2 + a.C * a.h
    return v[:o1].reshape(a.h, a.d), v[o1:o2], v[o2:o3].reshape(a.C, a.h), v[o3:]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(p: ModelParams, x: np.ndarray, y: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != p.arch.d:
        raise DimensionMismatch(f"batch has shape {x.shape}, model expects d={p.arch.d}")
    if y is not None:
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if y.shape[0] != x.shape[0]:
            raise DimensionMismatch("features and labels differ in length")
        if y.size and (y.min() < 0 or y.max() >= p.arch.C):
            raise DimensionMismatch(f"labels outside [0, {p.arch.C})")
    return x, y


def logits(p: ModelParams, x: np.ndarray) -> np.ndarray:
    x, _ = _check_batch(p, x)
    if p.arch.kind is ArchKind.LOGREG:
        w, b = unpack(p)
        return x @ w.T + b
    w1, b1, w2, b2 = unpack(p)
    return np.tanh(x @ w1.T + b1) @ w2.T + b2


def predict_proba(p: ModelParams, x: np.ndarray) -> np.ndarray:
    return softmax(logits(p, x))


def loss_and_grad(p: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    x, y = _check_batch(p, x, y)
    n = x.shape[0]
    if n == 0:
        raise DimensionMismatch("empty batch")
    onehot = np.zeros((n, p.arch.C))
    onehot[np.arange(n), y] = 1.0

    if p.arch.kind is ArchKind.LOGREG:
        w, b = unpack(p)
        z = x @ w.T + b
        hidden = None
    else:
        w1, b1, w2, b2 = unpack(p)
        hidden = np.tanh(x @ w1.T + b1)
        z = hidden @ w2.T + b2

    zs = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(zs).sum(axis=1))
    loss = float(np.mean(log_norm - zs[np.arange(n), y]))
    resid = (np.exp(zs - log_norm[:, None]) - onehot) / n  # dL/dz

    if hidden is None:
        grad = np.concatenate([(resid.T @ x).ravel(), resid.sum(axis=0)])
    else:
        g_w2 = resid.T @ hidden
        g_b2 = resid.sum(axis=0)
        back = (resid @ w2) * (1.0 - hidden**2)
        grad = np.concatenate([(back.T @ x).ravel(), back.sum(axis=0), g_w2.ravel(), g_b2])
    return loss, grad


def local_train(p: ModelParams, x: np.ndarray, y: np.ndarray, hp: Hyperparams,
                seed: int) -> tuple[ModelParams, int]:
    """Mini-batch SGD on one user's shard; returns the new params and the shard size."""
    x, y = _check_batch(p, x, y)
    n = x.shape[0]
    if n == 0:
        raise EmptyShard("cannot train on an empty shard")
    rng = np.random.default_rng(seed)
    values = p.values.copy()
    for _ in range(hp.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            _, g = loss_and_grad(ModelParams(values, p.arch), x[idx], y[idx])
            values -= hp.learning_rate * g
    return ModelParams(values, p.arch), n


def evaluate(p: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(accuracy, mean cross-entropy); argmax ties go to the lower class index."""
    x, y = _check_batch(p, x, y)
    z = logits(p, x)
    acc = float(np.mean(np.argmax(z, axis=1) == y))
    loss, _ = loss_and_grad(p, x, y)
    return acc, loss


def dump_csv(p: ModelParams, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "value"])
        for i, v in enumerate(p.values):
            writer.writerow([i, repr(float(v))])
