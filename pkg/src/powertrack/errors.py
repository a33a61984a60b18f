"""Exception types raised across the package."""


class PowertrackError(Exception):
    """Base class for all package errors."""


class ScheduleError(PowertrackError):
    """Channel schedule produced an invalid (nonpositive) mean."""


class DomainError(PowertrackError, ValueError):
    """Argument outside the domain where a function is finite."""


class DegenerateModelError(PowertrackError, ValueError):
    """Plant with identical open- and closed-loop gains."""


class OracleError(PowertrackError):
    """Reference solver failed to certify its answer."""


class ConfigError(PowertrackError):
    """Invalid configuration; ``path`` names the offending key."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
