"""Exception hierarchy shared across the package."""


class DiffGanError(Exception):
    """Base class for all package errors."""


class DimensionError(DiffGanError, ValueError):
    """Shapes of operands do not agree."""


class ArgumentError(DiffGanError, ValueError):
    """An argument is outside its documented domain."""


class NumericError(DiffGanError, ArithmeticError):
    """A computation produced a non-finite value."""


class ConfigError(DiffGanError, ValueError):
    """Invalid or inconsistent configuration."""


class DatasetError(DiffGanError, ValueError):
    """A dataset is empty, malformed or inconsistent."""


class CheckpointError(DiffGanError, IOError):
    """A checkpoint could not be loaded."""
