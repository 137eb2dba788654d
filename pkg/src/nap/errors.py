"""Exception types shared across the package."""


class NapError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(NapError, ValueError):
    """Array shapes or axes are incompatible with an operation."""


class ValidationError(NapError, ValueError):
    """Input data violates a documented precondition."""


class ConfigError(NapError, ValueError):
    """A configuration object is internally inconsistent."""


class NumericError(NapError, ArithmeticError):
    """A computation produced non-finite values."""


class ParseError(NapError, ValueError):
    """A serialized file is malformed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(ParseError):
    """A serialized file declares a version this code cannot read."""
