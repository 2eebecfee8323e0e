"""Exception types shared across the package."""


class FocalFlowError(Exception):
    """Base class for all package errors."""


class DimensionError(FocalFlowError, ValueError):
    """Array shapes or lengths do not match."""


class RangeError(FocalFlowError, ValueError):
    """A scalar or index lies outside its admissible range."""


class OrderingError(FocalFlowError, ValueError):
    """Chunks or steps are not in the required order."""


class ConfigurationError(FocalFlowError, ValueError):
    """Invalid or inconsistent configuration."""


class StateError(FocalFlowError, RuntimeError):
    """An operation was invoked in the wrong lifecycle state."""


class TrainingDivergedError(FocalFlowError, RuntimeError):
    """Loss became non-finite; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot
