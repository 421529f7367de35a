"""Exception hierarchy. The CLI maps DataError to exit code 3 and
NumericError to exit code 4."""


class DataError(Exception):
    """Input data is malformed or inconsistent."""


class EventParseError(DataError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class EventValidationError(DataError):
    pass


class StaleEventError(DataError):
    """Event is older than the graph's window start."""


class OutOfOrderEventError(DataError):
    """Event arrived earlier than the newest node already in the graph."""


class CheckpointError(DataError):
    pass


class CacheInconsistentError(RuntimeError):
    """The activation cache no longer matches the graph; call ``rebuild()``."""


class NumericError(ArithmeticError):
    """Non-finite values (loss divergence, NaN gradients)."""
