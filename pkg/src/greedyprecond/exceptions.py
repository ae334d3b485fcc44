"""Exception types raised across the package."""


class GreedyPrecondError(Exception):
    """Base class for all package errors."""


class InvalidInputError(GreedyPrecondError, ValueError):
    """Malformed arguments: wrong shapes, non-finite entries, asymmetric matrices."""


class CapacityError(GreedyPrecondError):
    """A dense intermediate would exceed its configured size cap."""


class RankDeficientError(GreedyPrecondError):
    """A system expected to have full column rank does not.

    The numerical rank that was found is kept on ``rank``.
    """

    def __init__(self, message, rank=None, expected=None):
        super().__init__(message)
        self.rank = rank
        self.expected = expected


class NumericalFailure(GreedyPrecondError, ArithmeticError):
    """An iterative method produced a non-finite value or failed to make progress.

    ``iteration`` is the inner index at which the failure was detected and
    ``outer`` the outer (training) iteration, when known.
    """

    def __init__(self, message, iteration=None, outer=None):
        super().__init__(message)
        self.iteration = iteration
        self.outer = outer


class ParseError(GreedyPrecondError, ValueError):
    """A data or schedule file could not be decoded."""
