"""Combining updates: weighted FedAvg, robust statistics and pairwise masking.

Masking is a functional stand-in for secure aggregation. Member ``i`` of a
mask group adds ``m_ij`` for every higher-id partner ``j`` and subtracts
``m_ji`` for every lower-id partner. Masks act on the weighted contribution
``w_i * delta_i``, so they cancel exactly in the FedAvg numerator whatever
the weights are.
"""

from __future__ import annotations

import math
from collections.abc import Collection, Sequence
from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np

from hflsim.errors import EmptyInput, LengthMismatch, MemberMismatch, NoSurvivors, OverTrimmed
from hflsim.seeding import stream

MASK_BOUND = 10.0


@dataclass(frozen=True, eq=False)
class Update:
    delta: np.ndarray
    weight: float
    origin: int
    round: int = 0
    masked: bool = False

    def __post_init__(self) -> None:
        d = np.asarray(self.delta, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(d)):
            raise ValueError(f"update from {self.origin} has non-finite entries")
        if not self.weight > 0:
            raise ValueError(f"update from {self.origin} has non-positive weight {self.weight}")
        object.__setattr__(self, "delta", d)

    def with_delta(self, delta: np.ndarray) -> Update:
        return replace(self, delta=delta)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Update):
            return NotImplemented
        return (self.weight == other.weight and self.origin == other.origin
                and self.round == other.round and self.masked == other.masked
                and np.array_equal(self.delta, other.delta))


@dataclass(frozen=True)
class MaskGroup:
    members: frozenset[int]
    pairwise_seed: int

    def __init__(self, members: Collection[int], pairwise_seed: int) -> None:
        object.__setattr__(self, "members", frozenset(members))
        object.__setattr__(self, "pairwise_seed", int(pairwise_seed))


def _stack(updates: Sequence[Update]) -> np.ndarray:
    if not updates:
        raise EmptyInput("no updates to aggregate")
    sizes = {u.delta.size for u in updates}
    if len(sizes) != 1:
        raise LengthMismatch(f"delta lengths differ: {sorted(sizes)}")
    return np.vstack([u.delta for u in updates])


def _combined(updates: Sequence[Update], delta: np.ndarray, origin: int, round: int | None) -> Update:
    return Update(delta, float(sum(u.weight for u in updates)), origin,
                  updates[0].round if round is None else round)


def fedavg(updates: Sequence[Update], origin: int = -1, round: int | None = None,
           correction: np.ndarray | None = None) -> Update:
    """Sample-weighted mean of the deltas, summed in input order.

    ``correction`` is subtracted from the weighted sum before dividing; it
    is how dropped mask-group members are cancelled out.
    """
    _stack(updates)
    total = 0.0
    acc = np.zeros_like(updates[0].delta)
    for u in updates:
        acc += u.weight * u.delta
        total += u.weight
    if correction is not None:
        if correction.shape != acc.shape:
            raise LengthMismatch("correction vector has the wrong length")
        acc -= correction
    return _combined(updates, acc / total, origin, round)


def median_aggregate(updates: Sequence[Update], origin: int = -1, round: int | None = None) -> Update:
    """Coordinate-wise median; weights only enter the returned total."""
    return _combined(updates, np.median(_stack(updates), axis=0), origin, round)


def trimmed_mean_aggregate(updates: Sequence[Update], beta: float, origin: int = -1,
                           round: int | None = None) -> Update:
    if not 0.0 <= beta < 0.5:
        raise ValueError(f"beta must lie in [0, 0.5), got {beta}")
    values = np.sort(_stack(updates), axis=0)
    m = values.shape[0]
    k = math.floor(beta * m)
    if m - 2 * k < 1:
        raise OverTrimmed(f"trimming {k} from each end of {m} values leaves nothing")
    return _combined(updates, values[k:m - k].mean(axis=0), origin, round)


AGGREGATORS = ("fedavg", "median", "trimmed_mean")
ROBUST_AGGREGATORS = frozenset({"median", "trimmed_mean"})


def aggregate(name: str, updates: Sequence[Update], origin: int = -1, round: int | None = None,
              beta: float = 0.1, correction: np.ndarray | None = None) -> Update:
    if name == "fedavg":
        return fedavg(updates, origin, round, correction)
    if correction is not None:
        raise ValueError(f"{name} cannot consume masked inputs")
    if name == "median":
        return median_aggregate(updates, origin, round)
    if name == "trimmed_mean":
        return trimmed_mean_aggregate(updates, beta, origin, round)
    raise ValueError(f"unknown aggregator {name!r}")


# -- masking --------------------------------------------------------------------------------


def pair_mask(group: MaskGroup, i: int, j: int, size: int) -> np.ndarray:
    return stream(group.pairwise_seed, i, j, "mask").uniform(-MASK_BOUND, MASK_BOUND, size)


def mask_updates(updates: Sequence[Update], group: MaskGroup) -> list[Update]:
    origins = [u.origin for u in updates]
    if len(group.members) < 2:
        raise MemberMismatch("masking needs a group of at least two members")
    if len(set(origins)) != len(origins) or set(origins) != group.members:
        raise MemberMismatch(f"update origins {sorted(origins)} != group members {sorted(group.members)}")
    size = _stack(updates).shape[1]
    total = {o: np.zeros(size) for o in origins}
    for i, j in combinations(sorted(group.members), 2):
        m = pair_mask(group, i, j, size)
        total[i] += m
        total[j] -= m
    return [replace(u, delta=(u.weight * u.delta + total[u.origin]) / u.weight, masked=True)
            for u in updates]


def unmask_on_dropout(group: MaskGroup, surviving: Collection[int], size: int) -> np.ndarray:
    """Residual mask mass left in the survivors' weighted sum.

    Pass the result as ``correction`` to :func:`fedavg` over the survivors.
    """
    surviving = set(surviving)
    if not surviving:
        raise NoSurvivors("every mask-group member dropped")
    if not surviving <= group.members:
        raise MemberMismatch(f"survivors {sorted(surviving - group.members)} are not group members")
    corr = np.zeros(size)
    for i, j in combinations(sorted(group.members), 2):
        if (i in surviving) == (j in surviving):
            continue
        m = pair_mask(group, i, j, size)
        corr += m if i in surviving else -m
    return corr
