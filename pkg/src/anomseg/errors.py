"""Shared exception types.

Every failure mode in the package maps onto one of the classes below so
callers can catch by category instead of string-matching messages.
"""


class AnomsegError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(AnomsegError, ValueError):
    """An argument value is outside its documented domain."""


class ShapeError(AnomsegError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class NumericError(AnomsegError, ArithmeticError):
    """A computation produced NaN or Inf, or is otherwise numerically invalid."""


class ContractError(AnomsegError, RuntimeError):
    """A documented invariant or calling contract was violated."""


class CapacityError(AnomsegError, RuntimeError):
    """A fixed capacity (context length, queue size) would be exceeded."""


class TokenizationError(AnomsegError, ValueError):
    """Text cannot be tokenized against the current vocabulary."""


class DatasetError(AnomsegError, RuntimeError):
    """On-disk dataset is missing, malformed, or would be clobbered."""


class MetricError(AnomsegError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""


class ProtocolError(AnomsegError, RuntimeError):
    """The evaluation protocol is violated (e.g. train/test class overlap)."""


class ConfigError(AnomsegError, ValueError):
    """A run configuration failed validation."""
