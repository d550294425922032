"""Exception and warning types shared across the package."""


class OmnidistError(Exception):
    pass


class FormatError(OmnidistError):
    """A document is missing fields or cannot be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(OmnidistError):
    """A document parses but violates a value constraint."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CalibrationError(OmnidistError):
    pass


class OutOfCalibrationRange(OmnidistError):
    pass


class NoGroundIntersection(OmnidistError):
    pass


class DomainError(OmnidistError, ValueError):
    pass


class ConfigError(OmnidistError, ValueError):
    pass


class ShapeError(OmnidistError, ValueError):
    pass


class GenerationError(OmnidistError):
    pass


class TrainingDiverged(OmnidistError):
    def __init__(self, step):
        super().__init__(f"total loss became non-finite at step {step}")
        self.step = step


class EmptyBatch(UserWarning):
    """Raised as a warning when a loss term has no contributing objects."""
