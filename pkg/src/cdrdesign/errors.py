"""Exception types raised across the package."""


class CdrDesignError(Exception):
    """Base class for all package errors."""


class InvalidInputError(CdrDesignError, ValueError):
    """Non-finite or otherwise malformed numeric input."""


class DegenerateGeometryError(CdrDesignError, ValueError):
    """Collinear or coincident points where a frame or angle is required."""


class EmptySetError(CdrDesignError, ValueError):
    """An operation over a point set received an empty set."""


class ShapeError(CdrDesignError, ValueError):
    """Operand shapes or lengths are incompatible."""


class ParseError(CdrDesignError, ValueError):
    """A structure document failed validation.

    ``field`` names the offending field when it is known.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class GenerationError(CdrDesignError, RuntimeError):
    """Synthetic complex placement failed within the attempt budget."""


class GraphConstructionError(CdrDesignError, ValueError):
    """A complex cannot be turned into a graph (e.g. empty CDR or antigen)."""


class NonFiniteError(CdrDesignError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class ConfigError(CdrDesignError, ValueError):
    """Unknown or invalid configuration key."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message)
