"""Exception hierarchy shared across the package."""


class AISError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AISError, ValueError):
    """Malformed configuration: bad boxes, schedules, plans."""


class UsageError(AISError, ValueError):
    """An operation was called outside its documented preconditions."""


class DomainError(AISError, ValueError):
    """A parameter lies outside the admissible domain of a family or formula."""


class NumericalOverflowError(AISError, ArithmeticError):
    """A likelihood ratio or iterate became non-finite."""

    def __init__(self, message: str, alpha=None, iteration: int | None = None):
        super().__init__(message)
        self.alpha = alpha
        self.iteration = iteration


class BracketError(AISError, RuntimeError):
    """A scalar root solve could not find a sign change."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class LevelUnreachableError(AISError, ValueError):
    """The normalized weight mass never reaches the requested level."""


class SolverError(AISError, RuntimeError):
    """An adaptive run failed; ``iteration`` is the 1-based index where it stopped."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration
