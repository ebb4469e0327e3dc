"""Communication and verification cost accounting."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from hflsim.trace import DOWN, UP, Trace

HEADER_BYTES = 64
BYTES_PER_PARAM = 8


class VerificationKind(str, enum.Enum):
    EXP = "exp"
    POLY = "poly"
    LINEAR = "linear"


@dataclass(frozen=True)
class VerificationCost:
    """Cost of verifying ``n`` children at one node: b**n, n**k or n."""

    kind: VerificationKind = VerificationKind.LINEAR
    base: float = 2.0
    k: float = 2.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", VerificationKind(self.kind))
        if self.kind is VerificationKind.EXP and not self.base > 1:
            raise ValueError("exponential verification cost needs base > 1")
        if self.kind is VerificationKind.POLY and not self.k > 0:
            raise ValueError("polynomial verification cost needs k > 0")

    def __call__(self, n: int) -> float:
        if self.kind is VerificationKind.EXP:
            return float(self.base) ** n
        if self.kind is VerificationKind.POLY:
            return float(n) ** self.k
        return float(n)


@dataclass(frozen=True)
class CostModel:
    param_count: int
    verification: VerificationCost = VerificationCost()

    @property
    def message_bytes(self) -> int:
        return BYTES_PER_PARAM * self.param_count + HEADER_BYTES


@dataclass(frozen=True)
class RoundCost:
    round: int
    comm_up_bytes: int
    comm_down_bytes: int
    verify_units: float
    cumulative_comm_bytes: int
    cumulative_verify_units: float


def account_costs(trace: Trace, cost: CostModel) -> list[RoundCost]:
    """Per-round totals over rounds 1..trace.rounds, plus running sums."""
    up = {r: 0 for r in range(1, trace.rounds + 1)}
    down = dict(up)
    verify = {r: 0.0 for r in up}
    for m in trace.messages:
        if m.direction == UP:
            up[m.round] += 1
        elif m.direction == DOWN:
            down[m.round] += 1
    for r, _node, n in trace.verifications:
        verify[r] += cost.verification(n)

    out, comm_total, verify_total = [], 0, 0.0
    for r in sorted(up):
        cu, cd = up[r] * cost.message_bytes, down[r] * cost.message_bytes
        comm_total += cu + cd
        verify_total += verify[r]
        out.append(RoundCost(r, cu, cd, verify[r], comm_total, verify_total))
    return out
