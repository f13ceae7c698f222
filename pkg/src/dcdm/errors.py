"""Exception hierarchy shared by every dcdm module."""


class DCDMError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DCDMError, ValueError):
    pass


class DomainError(DCDMError, ValueError):
    pass


class FormatError(DCDMError):
    """Malformed tensor container; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class WiringError(DCDMError, ValueError):
    pass


class StateError(DCDMError):
    pass


class FreezeViolationError(StateError):
    pass


class NumericalError(DCDMError, ArithmeticError):
    def __init__(self, message: str, timestep: int | None = None):
        if timestep is not None:
            message = f"{message} (timestep {timestep})"
        super().__init__(message)
        self.timestep = timestep


class RoutingError(DCDMError):
    pass


class UndefinedMetricError(DCDMError, ArithmeticError):
    pass
