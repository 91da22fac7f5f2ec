"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ShadowADError(Exception):
    exit_code = 1


class ValidationError(ShadowADError, ValueError):
    """Bad arguments, configs or inputs violating a precondition."""

    exit_code = 2


class DataError(ShadowADError):
    """Unreadable files, mismatched datasets, I/O failures."""

    exit_code = 3


class NumericalError(ShadowADError, FloatingPointError):
    """NaN/Inf in a loss, gradient or activation."""

    exit_code = 4

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class ModelMismatchError(ShadowADError):
    """Checkpoint fingerprint or network type does not match."""

    exit_code = 5
