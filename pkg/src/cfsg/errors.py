"""Exception hierarchy shared across the package."""


class CFSGError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(CFSGError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ValidationError(CFSGError, ValueError):
    """Input data, configuration, or file content failed validation."""


class NumericError(CFSGError, ArithmeticError):
    """A computation produced or encountered a non-finite value."""


class UndefinedCorrelationError(CFSGError, ValueError):
    """Rank correlation is undefined (a constant input sequence)."""


class UninitializedCentroidError(CFSGError, RuntimeError):
    """A sub-centroid was queried before ever receiving a prototype."""


class CheckpointError(CFSGError, ValueError):
    """Checkpoint file is missing, truncated, or structurally invalid."""


class DivergenceError(CFSGError, RuntimeError):
    """Training hit a non-finite loss.

    Carries the last finite state so callers can report how far the run got.
    """

    def __init__(self, message, step=None, history=None):
        super().__init__(message)
        self.step = step
        self.history = history if history is not None else []
