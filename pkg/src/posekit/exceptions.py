"""Exception types raised across the package."""


class PosekitError(Exception):
    """Base class for all package errors."""


class InvalidRotationError(PosekitError, ValueError):
    pass


class BehindCameraError(PosekitError, ValueError):
    pass


class InvalidDepthError(PosekitError, ValueError):
    pass


class OutOfViewError(PosekitError, ValueError):
    pass


class ConfigurationError(PosekitError, ValueError):
    """Shape or parameter mismatch in a network or config."""


class StateError(PosekitError, RuntimeError):
    """An operation was called in the wrong order, e.g. backward before forward."""


class DivergenceError(PosekitError, FloatingPointError):
    """A training loss became non-finite."""


class DataError(PosekitError, ValueError):
    """Malformed or inconsistent input files."""


class UndefinedMetricError(PosekitError, ValueError):
    pass
