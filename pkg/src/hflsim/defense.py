"""Detection and response at aggregating nodes, and the linkability audit."""

from __future__ import annotations

import enum
import logging
from collections.abc import Collection, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from hflsim.aggregation import Update
from hflsim.errors import IncompleteTrace
from hflsim.topology import Hierarchy, remove_subtree
from hflsim.trace import INDIVIDUAL, UP, Trace

logger = logging.getLogger(__name__)

MAD_SCALE = 1.4826
MAD_FLOOR = 1e-9
MIN_DETECTABLE = 3


class Response(str, enum.Enum):
    FLAG_ONLY = "flag_only"
    EXCLUDE = "exclude"
    WITHHOLD_BROADCAST = "withhold_broadcast"


@dataclass(frozen=True)
class DetectionPolicy:
    threshold: float = 3.0
    response: Response = Response.FLAG_ONLY
    switch_to_median_on_notify: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "response", Response(self.response))
        if not self.threshold > 0:
            raise ValueError("detection threshold must be positive")


@dataclass(frozen=True)
class Notification:
    detector: int
    flagged: int
    round: int
    z: float
    action: Response


def norm_zscores(updates: Sequence[Update]) -> dict[int, float]:
    """Robust z-score of each update's L2 norm: |n - med| / (1.4826 MAD + 1e-9)."""
    norms = np.array([np.linalg.norm(u.delta) for u in updates])
    med = np.median(norms)
    mad = np.median(np.abs(norms - med))
    z = np.abs(norms - med) / (MAD_SCALE * mad + MAD_FLOOR)
    return {u.origin: float(s) for u, s in zip(updates, z)}


def detect_anomalies(updates: Sequence[Update], policy: DetectionPolicy) -> set[int]:
    if len(updates) < MIN_DETECTABLE:
        logger.debug("Undetectable: only %d updates", len(updates))
        return set()
    return {o for o, z in norm_zscores(updates).items() if z > policy.threshold}


def respond(h: Hierarchy, flagged: Collection[int], policy: DetectionPolicy, detector: int,
            round: int, scores: Mapping[int, float] | None = None,
            ) -> tuple[Hierarchy, list[Notification], set[int]]:
    """Apply the configured response.

    Returns the (possibly pruned) hierarchy, one notification per flagged
    child and the set of children whose next model push is withheld.
    """
    scores = scores or {}
    notes = [Notification(detector, f, round, float(scores.get(f, float("nan"))), policy.response)
             for f in sorted(flagged)]
    withheld: set[int] = set()
    if policy.response is Response.EXCLUDE:
        for f in sorted(flagged):
            if f in h:
                h = remove_subtree(h, f)
    elif policy.response is Response.WITHHOLD_BROADCAST:
        withheld = set(flagged)
    return h, notes, withheld


@dataclass(frozen=True)
class LinkabilityReport:
    links: frozenset[tuple[int, int]]
    per_layer: Mapping[int, int] = field(default_factory=dict)

    def linked(self, observer: int, user: int) -> bool:
        return (observer, user) in self.links

    def users_linked_to(self, observer: int) -> set[int]:
        return {u for o, u in self.links if o == observer}

    def to_record(self) -> dict:
        return {
            "links": [[o, u] for o, u in sorted(self.links)],
            "per_layer": {str(k): v for k, v in sorted(self.per_layer.items())},
            "total": len(self.links),
        }


def audit_linkability(trace: Trace) -> LinkabilityReport:
    """(observer, user) is linked iff observer read that user's own unmasked update."""
    if not trace.complete:
        raise IncompleteTrace("trace was not closed by a finished run")
    links: dict[tuple[int, int], int] = {}
    for m in trace.messages:
        if m.direction == UP and m.kind == INDIVIDUAL and not m.masked:
            links.setdefault((m.receiver, m.origin), m.receiver_layer)
    for e in trace.exposures:
        links.setdefault((e.observer, e.user), e.observer_layer)
    per_layer: dict[int, int] = {}
    for layer in links.values():
        per_layer[layer] = per_layer.get(layer, 0) + 1
    return LinkabilityReport(frozenset(links), per_layer)
