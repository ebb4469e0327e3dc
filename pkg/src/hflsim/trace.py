"""Record of every message one simulation delivered."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UP = "up"
DOWN = "down"

INDIVIDUAL = "individual"  # a single user's own update
AGGREGATE = "aggregate"    # a server's combined update
MODEL = "model"            # parameters pushed down


@dataclass(frozen=True, eq=False)
class Message:
    seq: int
    round: int
    direction: str
    sender: int
    receiver: int
    receiver_layer: int
    kind: str
    origin: int
    masked: bool
    weight: float | None
    payload: np.ndarray

    def to_record(self) -> dict:
        return {
            "seq": self.seq,
            "round": self.round,
            "direction": self.direction,
            "sender": self.sender,
            "receiver": self.receiver,
            "kind": self.kind,
            "origin": self.origin,
            "masked": self.masked,
            "weight": self.weight,
            "payload": [float(v) for v in self.payload],
        }


@dataclass(frozen=True)
class Exposure:
    """An individual update became readable at ``observer`` without a plain message.

    Happens when mask-group dropouts leave a single survivor.
    """

    round: int
    observer: int
    observer_layer: int
    user: int


@dataclass
class Trace:
    messages: list[Message] = field(default_factory=list)
    exposures: list[Exposure] = field(default_factory=list)
    # (round, node, number of children verified)
    verifications: list[tuple[int, int, int]] = field(default_factory=list)
    rounds: int = 0
    complete: bool = False

    def deliver(self, round: int, direction: str, sender: int, receiver: int, receiver_layer: int,
                kind: str, origin: int, masked: bool, weight: float | None,
                payload: np.ndarray) -> Message:
        msg = Message(len(self.messages), round, direction, sender, receiver, receiver_layer,
                      kind, origin, masked, weight, np.array(payload, dtype=np.float64))
        self.messages.append(msg)
        return msg

    def in_round(self, round: int) -> list[Message]:
        return [m for m in self.messages if m.round == round]
