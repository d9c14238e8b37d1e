"""Exception hierarchy.

Each error carries the process exit code the CLI reports for it.
"""


class BTDError(Exception):
    exit_code = 1


class ConfigError(BTDError, ValueError):
    exit_code = 1


class InputError(BTDError, ValueError):
    exit_code = 1


class DataError(BTDError, ValueError):
    exit_code = 2


class ValidationError(BTDError, ValueError):
    exit_code = 1


class CalibrationError(BTDError, ValueError):
    exit_code = 1


class MetricError(BTDError, ValueError):
    exit_code = 1


class NumericError(BTDError, ArithmeticError):
    exit_code = 3


class TrainingDivergedError(NumericError):
    pass


class GenerationError(NumericError):
    pass
