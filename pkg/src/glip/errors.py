"""Exception types shared across the package."""


class GlipError(Exception):
    """Base class for all package errors."""


class DomainError(GlipError, ValueError):
    """An argument lies outside the admissible domain of a model."""


class PreconditionError(GlipError, ValueError):
    """A documented precondition of a calculator is violated."""


class ConvergenceError(GlipError, RuntimeError):
    """An iterative solver stopped before meeting its tolerance.

    The last iterate and a short trace are kept so callers can inspect or
    restart from them.
    """

    def __init__(self, message, last_iterate=None, trace=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.trace = trace or []
