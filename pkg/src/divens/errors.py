"""Exception types raised across the package."""

from __future__ import annotations


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A model, regularizer or experiment configuration is invalid."""


class UsageError(RuntimeError):
    """An API was called in a way its contract does not allow."""


class NumericalError(ArithmeticError):
    """A numerical routine failed; ``pivot`` is set for Cholesky failures."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


class FormatError(ValueError):
    """A binary or text file does not match its declared layout."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, step: int, value: float, trace=None):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
        self.trace = trace
