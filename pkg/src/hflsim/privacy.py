"""Perturbations applied to an update before it leaves a node."""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass

import numpy as np

from hflsim.aggregation import Update
from hflsim.errors import InvalidPipeline


@dataclass(frozen=True)
class Clip:
    C: float

    def __post_init__(self) -> None:
        if not self.C > 0:
            raise InvalidPipeline(f"clip norm must be positive, got {self.C}")


@dataclass(frozen=True)
class GaussNoise:
    sigma: float

    def __post_init__(self) -> None:
        if not self.sigma >= 0:
            raise InvalidPipeline(f"noise sigma must be non-negative, got {self.sigma}")


@dataclass(frozen=True)
class FractionShare:
    k: float

    def __post_init__(self) -> None:
        if not 0.0 < self.k <= 1.0:
            raise InvalidPipeline(f"share fraction must lie in (0, 1], got {self.k}")


Step = Clip | GaussNoise | FractionShare


@dataclass(frozen=True)
class DefensePipeline:
    steps: tuple[Step, ...] = ()

    def __init__(self, steps: Iterable[Step] = ()) -> None:
        steps = tuple(steps)
        clips = [i for i, s in enumerate(steps) if isinstance(s, Clip)]
        noises = [i for i, s in enumerate(steps) if isinstance(s, GaussNoise)]
        if len(clips) > 1:
            raise InvalidPipeline("at most one clip step is allowed")
        if clips and noises and min(noises) < clips[0]:
            raise InvalidPipeline("clipping must come before Gaussian noise")
        for s in steps:
            if not isinstance(s, (Clip, GaussNoise, FractionShare)):
                raise InvalidPipeline(f"unknown pipeline step {s!r}")
        object.__setattr__(self, "steps", steps)

    def __bool__(self) -> bool:
        return bool(self.steps)

    @classmethod
    def from_config(cls, raw: Iterable[Mapping[str, float]]) -> DefensePipeline:
        """Parse ``[{"clip": 1.0}, {"gauss": 0.1}, {"fraction": 0.5}]``."""
        makers = {"clip": Clip, "gauss": GaussNoise, "fraction": FractionShare}
        steps = []
        for entry in raw:
            if not isinstance(entry, Mapping) or len(entry) != 1:
                raise InvalidPipeline(f"each step must be a single-key mapping, got {entry!r}")
            (name, value), = entry.items()
            if name not in makers:
                raise InvalidPipeline(f"unknown pipeline step {name!r}")
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise InvalidPipeline(f"step {name!r} needs a number, got {value!r}")
            steps.append(makers[name](float(value)))
        return cls(steps)

    def to_config(self) -> list[dict[str, float]]:
        names = {Clip: ("clip", "C"), GaussNoise: ("gauss", "sigma"), FractionShare: ("fraction", "k")}
        out = []
        for s in self.steps:
            key, attr = names[type(s)]
            out.append({key: getattr(s, attr)})
        return out

    def noise_and_clip(self) -> tuple[float | None, float | None]:
        sigma = next((s.sigma for s in self.steps if isinstance(s, GaussNoise)), None)
        clip = next((s.C for s in self.steps if isinstance(s, Clip)), None)
        return sigma, clip


def clip_update(u: Update, C: float) -> Update:
    if not C > 0:
        raise ValueError(f"clip norm must be positive, got {C}")
    norm = float(np.linalg.norm(u.delta))
    if norm <= C:
        return u
    return u.with_delta(u.delta * (C / norm))


def add_gauss_noise(u: Update, sigma: float, rng: np.random.Generator) -> Update:
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return u
    return u.with_delta(u.delta + rng.normal(0.0, sigma, u.delta.size))


def fraction_share(u: Update, k: float) -> Update:
    """Keep the ceil(k * len) largest-magnitude coordinates, earliest index on ties."""
    if not 0.0 < k <= 1.0:
        raise ValueError(f"k must lie in (0, 1], got {k}")
    n = u.delta.size
    keep = min(n, math.ceil(round(k * n, 9)))
    if keep == n:
        return u
    order = np.argsort(-np.abs(u.delta), kind="stable")
    out = np.zeros_like(u.delta)
    out[order[:keep]] = u.delta[order[:keep]]
    return u.with_delta(out)


def apply_pipeline(u: Update, p: DefensePipeline, rng: np.random.Generator) -> Update:
    if not isinstance(p, DefensePipeline):
        raise InvalidPipeline(f"expected a DefensePipeline, got {type(p).__name__}")
    for step in p.steps:
        if isinstance(step, Clip):
            u = clip_update(u, step.C)
        elif isinstance(step, GaussNoise):
            u = add_gauss_noise(u, step.sigma, rng)
        else:
            u = fraction_share(u, step.k)
    return u


def privacy_accounting(sigma: float, C: float, rounds: int) -> tuple[float, int]:
    """Noise multiplier sigma / C and the number of shared rounds. No epsilon."""
    if not (sigma > 0 and C > 0):
        raise ValueError("sigma and C must both be positive")
    return sigma / C, int(rounds)
