"""Exception types raised by the solvers and estimators."""


class GVDError(Exception):
    """Base class for package errors."""


class ConvergenceError(GVDError):
    """An iterative estimate did not reach its tolerance.

    ``estimate`` carries the last iterate's value so callers can still
    inspect or use it.
    """

    def __init__(self, message, estimate=None, iterations=None):
        super().__init__(message)
        self.estimate = estimate
        self.iterations = iterations


class NumericalError(GVDError):
    """Non-finite values appeared during a computation."""


class FormatError(GVDError):
    """A file does not follow the expected binary or text layout."""
