"""Exception types shared across the package."""


class MetadynError(Exception):
    pass


class InvalidInputError(MetadynError, ValueError):
    pass


class SingularSystemError(MetadynError):
    pass


class UndefinedModeError(MetadynError, ValueError):
    """A projection was requested onto a mode with zero target amplitude."""


class DivergenceError(MetadynError, FloatingPointError):
    """Training produced a non-finite loss or parameter.

    ``last_good`` carries whatever the trainer had recorded before the failure
    (a partial trace or the last checkpoint list) so callers can inspect it.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class ConfigError(MetadynError, ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
