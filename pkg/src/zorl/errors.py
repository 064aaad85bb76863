"""Exception hierarchy shared across the package."""


class ZorlError(Exception):
    """Base class for all package errors."""


class InvalidDimensionError(ZorlError, ValueError):
    pass


class DimensionMismatchError(ZorlError, ValueError):
    pass


class NonFiniteError(ZorlError, ValueError):
    pass


class DataFormatError(ZorlError, ValueError):
    """Malformed dataset file or unusable dataset contents."""


class EstimationError(ZorlError, ArithmeticError):
    """An objective returned a non-finite value at a query point."""

    def __init__(self, message: str, point=None):
        super().__init__(message)
        self.point = point


class StaleTapeError(ZorlError, RuntimeError):
    pass


class SerializationError(ZorlError, ValueError):
    pass


class VersionError(SerializationError):
    pass


class ChecksumError(SerializationError):
    pass


class DivergenceError(ZorlError, ArithmeticError):
    pass


class ConfigError(ZorlError, ValueError):
    pass
