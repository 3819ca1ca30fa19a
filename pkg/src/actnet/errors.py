"""Exception types shared across the package."""


class ActnetError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ActnetError, ValueError):
    """Operands have incompatible dimensions or an invalid shape."""


class ParameterError(ActnetError, ValueError):
    """A numeric parameter or option is outside its valid range."""


class DataError(ActnetError, ValueError):
    """A dataset, input collection or value violates a precondition."""


class StateError(ActnetError, RuntimeError):
    """An operation was called before its required state was prepared."""


class NumericalError(ActnetError, ArithmeticError):
    """A computation produced a non-finite value it cannot recover from."""


class FormatError(ActnetError, ValueError):
    """A binary or JSON artifact is malformed.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
