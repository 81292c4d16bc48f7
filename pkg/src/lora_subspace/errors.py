"""Exception hierarchy shared by every module."""

from __future__ import annotations


class LoraSubspaceError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(LoraSubspaceError, ValueError):
    pass


class DimensionError(InvalidInput):
    pass


class SingularError(LoraSubspaceError, ArithmeticError):
    pass


class DivergenceError(LoraSubspaceError, ArithmeticError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss diverged at step {step}: {loss!r}")
        self.step = step
        self.loss = loss


class IoError(LoraSubspaceError, OSError):
    pass


class UnsupportedFormat(IoError):
    pass


class CorruptBlob(IoError):
    def __init__(self, file: str, expected: int, actual: int):
        super().__init__(f"{file}: expected {expected} bytes, found {actual}")
        self.file = file
        self.expected = expected
        self.actual = actual
