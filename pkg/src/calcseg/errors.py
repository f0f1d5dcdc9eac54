"""Exception hierarchy shared by every calcseg module."""


class CalcsegError(Exception):
    """Base class for all library errors."""


class DimensionMismatchError(CalcsegError, ValueError):
    def __init__(self, message, expected=None, actual=None):
        if expected is not None or actual is not None:
            message = f"{message}: expected {expected}, got {actual}"
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class ConfigError(CalcsegError, ValueError):
    pass


class DegenerateBatchError(CalcsegError):
    """Raised when a loss is requested over an empty contribution mask."""


class NumericalError(CalcsegError, FloatingPointError):
    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


class UndefinedMetricError(CalcsegError, ValueError):
    pass


class DataError(CalcsegError):
    """A dataset record failed validation."""

    def __init__(self, message, record=None):
        super().__init__(message if record is None else f"record {record}: {message}")
        self.record = record


class CheckpointError(CalcsegError):
    pass
