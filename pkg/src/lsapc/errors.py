"""Exception hierarchy shared across the package."""


class LsapcError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(LsapcError, ValueError):
    """A parameter lies outside its admissible range."""


class DimensionError(LsapcError, ValueError):
    """Array shapes are inconsistent with each other."""


class DataError(LsapcError, ValueError):
    """Malformed or inconsistent input data (files, metadata)."""


class ConfigError(LsapcError, ValueError):
    """Invalid or incomplete experiment configuration."""


class NumericalError(LsapcError, ArithmeticError):
    """A numerical routine failed (loss of definiteness, non-finite values)."""


class ConditioningError(NumericalError):
    """A triangular factor is numerically singular."""


class NotPositiveDefiniteError(NumericalError):
    """A covariance matrix failed its Cholesky factorization."""

    def __init__(self, message, xi=None):
        super().__init__(message)
        self.xi = xi


class EstimationError(NumericalError):
    """A Monte Carlo estimate came out non-finite."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block
