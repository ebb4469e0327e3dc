"""Exception hierarchy for the simulator."""

from __future__ import annotations


class HFLError(Exception):
    """Base class for every error raised by hflsim."""


# -- topology -----------------------------------------------------------------


class TopologyError(HFLError, ValueError):
    """A hierarchy violates a structural invariant.

    ``node_id`` names the offending node when there is one.
    """

    def __init__(self, node_id: int | None = None, message: str = "") -> None:
        self.node_id = node_id
        detail = message or type(self).__name__
        if node_id is not None:
            detail = f"{detail} (node {node_id})"
        super().__init__(detail)


class CycleDetected(TopologyError):
    pass


class MultipleRoots(TopologyError):
    pass


class MissingRoot(TopologyError):
    pass


class DuplicateNode(TopologyError):
    pass


class UserWithChildren(TopologyError):
    pass


class EmptyGroupServer(TopologyError):
    pass


class DanglingParent(TopologyError):
    pass


class NodeNotFound(TopologyError, KeyError):
    def __str__(self) -> str:  # KeyError would otherwise repr() the message
        return self.args[0]


class CannotRemoveRoot(TopologyError):
    pass


class GroupCountMismatch(TopologyError):
    pass


# -- data / model ---------------------------------------------------------------


class MoreUsersThanSamples(HFLError, ValueError):
    pass


class DegenerateSplit(HFLError, ValueError):
    pass


class DimensionMismatch(HFLError, ValueError):
    pass


class EmptyShard(HFLError, ValueError):
    pass


# -- aggregation / privacy --------------------------------------------------------


class EmptyInput(HFLError, ValueError):
    pass


class LengthMismatch(HFLError, ValueError):
    pass


class OverTrimmed(HFLError, ValueError):
    pass


class MemberMismatch(HFLError, ValueError):
    pass


class NoSurvivors(HFLError, ValueError):
    pass


class InvalidPipeline(HFLError, ValueError):
    pass


# -- adversary / defense ------------------------------------------------------------


class NotReconstructible(HFLError):
    pass


class IncompleteTrace(HFLError):
    pass


# -- configuration --------------------------------------------------------------------


class ConfigError(HFLError):
    """Raised for anything wrong with a scenario document."""


class ParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None) -> None:
        self.line = line
        self.column = column
        where = f" at line {line}, column {column}" if line is not None else ""
        super().__init__(f"{message}{where}")


class ConfigValidationError(ConfigError):
    """Carries every problem found, not just the first."""

    def __init__(self, errors: list[str]) -> None:
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
