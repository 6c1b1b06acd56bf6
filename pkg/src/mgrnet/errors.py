"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the CLI exit status it maps to.
"""


class MgrnetError(Exception):
    exit_code = 1


class ConfigurationError(MgrnetError, ValueError):
    """Invalid hyperparameter, kernel size, pooling target, config key..."""

    exit_code = 1


class StructuralError(MgrnetError, ValueError):
    """Shapes or channel counts that do not line up."""

    exit_code = 1


class UsageError(MgrnetError, RuntimeError):
    exit_code = 1


class DataError(MgrnetError):
    exit_code = 2


class BadMagicError(DataError):
    pass


class PayloadMismatchError(DataError):
    pass


class NonFiniteDataError(DataError):
    pass


class ConversionError(DataError):
    pass


class FitError(DataError):
    pass


class NumericError(MgrnetError, ArithmeticError):
    exit_code = 3
