"""Exception types shared across the package.

Builtin exceptions are used where they already say the right thing
(KeyError for unknown lookup keys, IndexError for out-of-range indices).
"""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of its valid range."""


class ParseError(ValueError):
    """An input file line could not be parsed; the message names the line."""


class FormatError(ValueError):
    """A file violates its declared format (bad header, duplicate id, wrong width)."""


class ShapeError(ValueError):
    """Operands have incompatible array shapes."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class TooShortError(ValueError):
    """A sequence is too short for the requested operation."""
