"""Exception types shared across the package."""


class MorphfitError(Exception):
    """Base class for all package errors."""


class InvalidArgument(MorphfitError, ValueError):
    pass


class DegenerateModel(MorphfitError, ValueError):
    pass


class DegenerateInput(MorphfitError, ValueError):
    pass


class OutOfRange(MorphfitError, ValueError):
    pass


class SolverFailure(MorphfitError, RuntimeError):
    """Raised when an iterative solver stops without meeting its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
