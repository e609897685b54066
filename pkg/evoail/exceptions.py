from __future__ import annotations

from typing import Optional


class EvoAILException(Exception):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)


class RAError(EvoAILException):
    """Exceptions related to reward assignment functions."""


class UnknownRAError(RAError):
    """Name is neither a builtin reward assignment function nor valid DSL."""


class RAParseError(RAError):
    """DSL text could not be parsed into an expression tree."""

    def __init__(self, message: str, offset: int = 0) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class RASizeError(RAError):
    """Expression tree exceeds the node count or depth limit."""


class DimensionMismatchError(EvoAILException):
    """Array shapes do not match the network or distribution they are used with."""


class NonFiniteSignalError(EvoAILException):
    """A training quantity became NaN or infinite."""

    def __init__(
        self, quantity: str, iteration: Optional[int] = None, *args, **kwargs
    ) -> None:
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"Non-finite {quantity}{where}", *args, **kwargs)
        self.quantity = quantity
        self.iteration = iteration


class ExpertFailureError(EvoAILException):
    """Expert policy could not produce a successful episode."""


class SolverSizeError(EvoAILException):
    """Problem too large for the exact transport solver."""


class DegenerateBaselineError(EvoAILException):
    """Random and expert baselines are equal, normalization is undefined."""


class DegenerateSamplesError(EvoAILException):
    """Samples have zero variance or are too few for density estimation."""


class PopulationTooSmallError(EvoAILException):
    """Population has fewer members than needed to form a pair."""


class LLMEndpointError(EvoAILException):
    """Chat completion endpoint failed or is disabled."""


class CheckpointError(EvoAILException):
    """Checkpoint or container file is malformed or of an incompatible version."""
