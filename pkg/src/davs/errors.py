"""Exception hierarchy shared by the geometry, solver, environment and CLI layers."""


class DavsError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(DavsError, ValueError):
    pass


class ConfigError(DavsError, ValueError):
    """Bad configuration key or value. The CLI maps this to exit code 2."""


class DegenerateError(DavsError):
    """Geometry that admits no well-defined answer. The CLI maps this to exit code 3."""


class DegenerateLogError(DegenerateError):
    pass


class DegeneratePathError(DegenerateError):
    pass


class UndefinedDirectionError(DegenerateError):
    pass


class InsufficientPointsError(DegenerateError):
    pass


class NonHemisphericError(DegenerateError):
    pass


class DegenerateHullError(DegenerateError):
    pass


class MalformedBoundaryError(DegenerateError):
    pass


class DegenerateFrameError(DegenerateError):
    pass


class NumericalFailureError(DavsError, ArithmeticError):
    pass


class NonConvergenceError(DavsError):
    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class InvalidTransitionError(DavsError, RuntimeError):
    pass
