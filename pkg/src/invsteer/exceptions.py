"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """Raised when an input violates a documented precondition."""


class DegenerateDirectionError(ValueError):
    """Raised when a class-mean difference is too small to normalize."""


class NoSupervisionError(RuntimeError):
    """Raised when no loss site passes the AUC threshold."""


class TrainingError(RuntimeError):
    """Raised when training has to abort (non-finite loss, too many skips)."""


class InversionError(RuntimeError):
    """Fixed-point inversion did not reach its tolerance.

    The attached ``report`` describes how far the solver got.
    """

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report
