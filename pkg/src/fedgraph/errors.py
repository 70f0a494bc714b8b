"""Exception types shared across the package."""

from __future__ import annotations


class FedgraphError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FedgraphError):
    """Operand shapes or dtypes do not satisfy an operation's contract."""


class PlacementError(FedgraphError):
    """A value's placement violates the signature of a federated operation."""


class TraceError(FedgraphError):
    """A program cannot be staged into a graph."""


class GraphError(FedgraphError):
    """A graph violates a structural invariant (SSA, closed primitive set, typing)."""


class AutodiffError(FedgraphError):
    """Differentiation was requested for an unsupported input/output configuration."""


class PlanError(FedgraphError):
    """A sharding spec or execution plan is inconsistent with the graph."""


class ExecutionError(FedgraphError):
    """A worker failed while executing a plan; no partial results are returned."""


class ParseError(FedgraphError):
    """Canonical bytes could not be parsed.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
