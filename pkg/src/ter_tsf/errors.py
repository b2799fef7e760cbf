"""Exception hierarchy. Each class maps to one CLI exit code."""


class TerError(Exception):
    exit_code = 1


class ConfigError(TerError, ValueError):
    exit_code = 1


class DataError(TerError, ValueError):
    exit_code = 2


class BackendError(TerError, RuntimeError):
    exit_code = 3

    def __init__(self, message, attempts=None):
        super().__init__(message)
        self.attempts = attempts


class DivergenceError(TerError, ArithmeticError):
    """Training loss became non-finite."""

    exit_code = 2
