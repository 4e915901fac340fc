"""Exception types shared across the engine."""

from __future__ import annotations


class EngineError(RuntimeError):
    """Base class for numerical failures inside the sampling engine."""


class NonFiniteStateError(EngineError):
    """A simulated state overflowed or became NaN; message names the location."""


class SolverError(EngineError):
    """A PDE solve produced non-finite values or an unusable grid."""


class DidNotConverge(EngineError):
    """Adaptive driver hit its level cap; carries the partial report."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
