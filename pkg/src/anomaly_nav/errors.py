"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class AnomalyNavError(Exception):
    exit_code = 1


class UsageError(AnomalyNavError, ValueError):
    """Bad arguments, unknown codes, incompatible configuration."""

    exit_code = 2


class DimensionError(UsageError):
    """Tensor shapes do not conform to an operation's contract."""


class FormatError(AnomalyNavError):
    """A container or checkpoint file is malformed, truncated or foreign."""

    exit_code = 3


class ValidationError(AnomalyNavError, ValueError):
    """Input data violates a domain invariant (e.g. a non-rotation matrix)."""

    exit_code = 3


class NumericError(AnomalyNavError, ArithmeticError):
    """Non-finite values appeared where finite ones were required."""

    exit_code = 4


class TrainingError(NumericError):
    pass
