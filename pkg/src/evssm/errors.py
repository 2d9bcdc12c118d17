"""Shared exception types."""


class DimensionError(ValueError):
    """Shapes or extents are inconsistent for the requested operation."""


class ConfigurationError(ValueError):
    """A structural parameter (kernel size, ratio, ...) is invalid."""


class DomainError(ValueError):
    """A numeric argument is outside the operation's domain."""


class DeterminismError(RuntimeError):
    """A function that must be deterministic returned differing results."""
