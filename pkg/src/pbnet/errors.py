"""Exception types shared across the package."""


class PbnetError(Exception):
    """Base class for all errors raised by pbnet."""


class ShapeError(PbnetError, ValueError):
    """Operand shapes do not conform."""


class DomainError(PbnetError, ValueError):
    """An argument lies outside the domain of the operation."""


class UsageError(PbnetError, RuntimeError):
    """An API was called in a way its contract forbids."""


class ConfigError(PbnetError, ValueError):
    """A configuration or file failed validation.

    ``field`` names the offending key when one can be identified.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
