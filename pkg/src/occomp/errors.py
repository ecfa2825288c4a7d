"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """A hyper-parameter or argument is outside its valid range."""


class NumericError(ArithmeticError):
    """A numeric routine failed to converge or produced non-finite values."""


class StateError(RuntimeError):
    """An operation was invoked before its required predecessor."""


class FormatError(ValueError):
    """A binary or text container does not match its documented layout."""


class ConfigError(ValueError):
    """An experiment configuration failed validation."""
