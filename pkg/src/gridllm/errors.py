"""Exception hierarchy shared by all gridllm modules."""

from __future__ import annotations


class GridLLMError(Exception):
    """Base class for every error raised by this package."""


class InvalidInput(GridLLMError):
    """Input values are malformed (non-finite, negative where forbidden, ...)."""


class DimensionError(InvalidInput):
    """A vector or matrix does not match the problem dimensions."""


class Infeasible(GridLLMError):
    """The problem admits no feasible point."""


class UnsupportedCost(GridLLMError):
    """Cost coefficients outside what the exact solver supports (a <= 0)."""


class EmptyProblem(InvalidInput):
    """A problem with no sessions / no units where at least one is required."""


class ConvergenceFailure(GridLLMError):
    """Iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message: str, *, iterations: int, primal_residual: float,
                 dual_residual: float) -> None:
        super().__init__(message)
        self.iterations = iterations
        self.primal_residual = primal_residual
        self.dual_residual = dual_residual


class Cancelled(GridLLMError):
    """A cooperative cancellation check requested an abort."""


class ParseFailure(GridLLMError):
    """Model output did not match the required solution-line grammar."""

    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


class ExtractionFailure(GridLLMError):
    """A tool-invocation code block was present but malformed."""

    def __init__(self, reason: str, *, fragment: str = "",
                 missing: tuple[str, ...] = ()) -> None:
        super().__init__(reason)
        self.reason = reason
        self.fragment = fragment
        self.missing = missing


class TransportError(GridLLMError):
    """A provider call failed after exhausting retries."""


class ReplayMiss(TransportError):
    """A replay provider has no recorded response for the request digest."""

    def __init__(self, digest: str) -> None:
        super().__init__(f"no transcript entry for request digest {digest}")
        self.digest = digest


class ProtocolError(GridLLMError):
    """A provider returned a payload that does not follow the wire format."""


class StorageError(GridLLMError):
    """Persisting an artifact to disk failed."""


class MigrationRequired(StorageError):
    """A persisted artifact uses an unsupported format version."""

    def __init__(self, message: str, *, found: object, expected: int) -> None:
        super().__init__(message)
        self.found = found
        self.expected = expected


class IntegrityError(StorageError):
    """A persisted artifact is corrupt."""

    def __init__(self, message: str, *, offset: int = -1) -> None:
        super().__init__(message)
        self.offset = offset


class InsufficientData(GridLLMError):
    """An evaluation needs more labeled items than the manifest provides."""
