"""Exception types shared across the package.

Each category maps to a distinct CLI exit code (see cli.EXIT_CODES), so
callers can distinguish bad inputs from missing pipeline state from
numerical failures.
"""


class VolPricerError(Exception):
    """Base class for all package errors."""


class DomainError(VolPricerError, ValueError):
    """An input violates a documented precondition (non-finite, out of range)."""


class NoSolutionError(VolPricerError):
    """A root-finding target lies at or outside its attainable bounds."""


class ConvergenceError(VolPricerError):
    """An iterative solver exhausted its iteration budget."""

    def __init__(self, message: str, bracket: tuple[float, float] | None = None):
        super().__init__(message)
        self.bracket = bracket


class CoverageError(VolPricerError):
    """Quotes do not span the target grid; carries the uncovered nodes."""

    def __init__(self, message: str, nodes: list[tuple[int, int]]):
        super().__init__(message)
        self.nodes = nodes


class ShapeError(VolPricerError):
    """Array shapes disagree with a layer or grid contract."""


class StateError(VolPricerError):
    """An operation was invoked before its prerequisites exist."""


class NumericError(VolPricerError):
    """A computation produced non-finite values."""


class GenerationError(VolPricerError):
    """Synthetic data generation failed (rejection budget, slice ordering)."""


class ParseError(VolPricerError):
    """A text input file is malformed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line
