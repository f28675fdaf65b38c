"""Exception types shared across the toolkit."""


class PDSError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(PDSError, ValueError):
    pass


class ConfigError(PDSError, ValueError):
    pass


class DegenerateFitError(PDSError, ValueError):
    """Raised when a regression design matrix is rank deficient."""


class SingularSystemError(PDSError, ValueError):
    """Raised when the kriging saddle-point system cannot be solved."""


class MissingStateError(PDSError):
    """No prior state is available for dead reckoning."""


class InsufficientDataError(PDSError, ValueError):
    pass


class CalibrationError(PDSError, ValueError):
    pass


class TraceFormatError(PDSError, ValueError):
    """Malformed trace file; ``line`` holds the 1-based offending line."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InitializationError(PDSError):
    pass


class NumericalError(PDSError, ArithmeticError):
    """A filter's covariance lost symmetry or positive semi-definiteness."""
