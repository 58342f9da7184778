"""Exception types shared across the package."""


class MomaError(Exception):
    pass


class ConfigError(MomaError, ValueError):
    """Invalid configuration or dimension mismatch."""


class NumericError(MomaError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class InputError(MomaError, ValueError):
    """Invalid runtime input (out-of-range action, stepping a finished episode, ...)."""


class DatasetError(MomaError):
    """Dataset file could not be loaded."""


class SchemaError(DatasetError):
    """Dataset header and records disagree."""
