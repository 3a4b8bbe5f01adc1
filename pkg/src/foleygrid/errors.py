"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, file
format / I-O problems exit 3, numeric failures exit 4.
"""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class GeometryError(ConfigError):
    """Grid geometry does not divide cleanly into patches."""


class ShapeError(ValueError):
    """Array arguments have incompatible shapes."""


class FormatError(ValueError):
    """A serialized file is truncated, mislabeled, or self-inconsistent."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or lost positive-definiteness."""


class StateError(RuntimeError):
    """An operation was applied to a state that does not admit it."""


class GenerationError(RuntimeError):
    """Random generation could not satisfy its constraints within the retry budget."""
