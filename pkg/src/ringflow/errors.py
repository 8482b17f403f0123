"""Exception types shared across the package."""


class RingflowError(Exception):
    """Base class for all package errors."""


class DomainError(RingflowError, ValueError):
    """An argument lies outside the domain of a model function."""


class ConfigError(RingflowError, ValueError):
    """A simulator or fitting configuration violates its invariants."""


class CapacityError(RingflowError, RuntimeError):
    """A requested simulation exceeds the particle-step budget."""


class NormalizationError(RingflowError, ValueError):
    """A trace cannot be normalized to its steady-state level."""


class GridMismatchError(RingflowError, ValueError):
    """Two traces do not share the same sampling grid."""


class TraceParseError(RingflowError, ValueError):
    """A trace file could not be parsed.

    Attributes
    ----------
    line : int or None
        1-based line number where parsing failed, if known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
