"""Exception hierarchy shared by the filter, calibration and CLI layers."""


class CebassError(Exception):
    """Base class for every error raised by this package."""


class SingularCovarianceError(CebassError):
    """A covariance matrix could not be factorised even after jitter escalation."""

    def __init__(self, message, time=None):
        if time is not None:
            message = f"{message} (time step {time})"
        super().__init__(message)
        self.time = time


class ConvergenceError(CebassError):
    def __init__(self, message, last_delta=None):
        super().__init__(message)
        self.last_delta = last_delta


class UnobservableModelError(CebassError):
    pass


class ZeroColumnError(CebassError):
    pass


class ConfigError(CebassError):
    pass


class DataError(CebassError):
    pass


class DegenerateFilterError(CebassError):
    pass
