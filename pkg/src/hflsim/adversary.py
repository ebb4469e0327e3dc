"""Threat models: passive observers, gradient inversion, malicious nodes."""

from __future__ import annotations

import enum
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from hflsim.aggregation import Update
from hflsim.errors import NotReconstructible
from hflsim.model import ArchKind, ModelParams, unpack

RESIDUAL_FLOOR = 1e-12


class ServerMode(str, enum.Enum):
    SCALE_UP = "scale_up"
    SCALE_DOWN_BROADCAST = "scale_down_broadcast"


@dataclass(frozen=True)
class PassiveObserver:
    at: int
    active_from_round: int = 1
    active_to_round: int | None = None


@dataclass(frozen=True)
class MaliciousUser:
    id: int
    gamma: float
    active_from_round: int = 1
    active_to_round: int | None = None


@dataclass(frozen=True)
class MaliciousServer:
    id: int
    gamma: float
    mode: ServerMode = ServerMode.SCALE_UP
    perturbation_scale: float = 1.0
    active_from_round: int = 1
    active_to_round: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", ServerMode(self.mode))


AdversarySpec = PassiveObserver | MaliciousUser | MaliciousServer


def is_active(spec: AdversarySpec, round: int) -> bool:
    hi = spec.active_to_round
    return spec.active_from_round <= round and (hi is None or round <= hi)


@dataclass(frozen=True, eq=False)
class Reconstruction:
    features: np.ndarray
    label: int


def reconstruct_from_gradient(u: Update, base: ModelParams, learning_rate: float,
                              class_index: int | None = None) -> Reconstruction:
    """Recover the single training row behind a one-step LogReg update.

    For softmax regression on one sample ``x`` with label ``y`` the gradient
    of row ``c`` of W is ``r_c * x`` and the bias gradient is ``r_c``, with
    ``r = softmax - onehot(y)``. Any class with a non-vanishing residual gives
    ``x`` by division, and the true class is the only negative residual.
    """
    if u.masked:
        raise NotReconstructible("update is masked")
    if base.arch.kind is not ArchKind.LOGREG:
        raise NotReconstructible("inversion is only exact for logreg")
    if not learning_rate > 0:
        raise NotReconstructible("learning rate must be positive to invert the step")
    if u.delta.size != base.arch.size:
        raise NotReconstructible("update does not match the model size")
    grad = base.with_values(-u.delta / learning_rate)
    g_w, g_b = unpack(grad)
    if np.all(np.abs(g_b) <= RESIDUAL_FLOOR):
        raise NotReconstructible("all residuals vanish")
    c = int(np.argmax(np.abs(g_b))) if class_index is None else class_index
    if abs(g_b[c]) <= RESIDUAL_FLOOR:
        raise NotReconstructible(f"residual of class {c} vanishes")
    return Reconstruction(g_w[c] / g_b[c], int(np.argmin(g_b)))


def reconstruction_error(rec: Reconstruction, truth: np.ndarray) -> float:
    return float(np.max(np.abs(rec.features - np.asarray(truth, dtype=np.float64))))


def malicious_scale(u: Update, gamma: float) -> Update:
    return u.with_delta(gamma * u.delta)


def poison_broadcast(m: ModelParams, gamma: float, perturbation: np.ndarray) -> ModelParams:
    return m.with_values(gamma * m.values + perturbation)


def draw_perturbation(rng: np.random.Generator, size: int, scale: float) -> np.ndarray:
    return scale * rng.standard_normal(size)


def observe(trace: Iterable, at: int, round: int) -> list:
    """Messages delivered to ``at`` during ``round``, in delivery order."""
    return [m for m in trace if m.receiver == at and m.round == round]
