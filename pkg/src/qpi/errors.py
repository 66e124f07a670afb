"""Exception hierarchy.

Each family maps onto a CLI exit code: usage/config errors exit 1, data
errors exit 2 and numeric failures exit 3.
"""


class QPIError(Exception):
    exit_code = 1


class UsageError(QPIError, ValueError):
    """Caller violated an operation's precondition."""

    exit_code = 1


class DimensionError(UsageError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(UsageError):
    pass


class DataError(QPIError):
    exit_code = 2


class InputError(DataError, UsageError):
    """An example cannot be processed (e.g. too short for the CNN head)."""


class CheckpointError(DataError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointMissingError(CheckpointError):
    pass


class NumericError(QPIError, ArithmeticError):
    exit_code = 3


class ConsistencyError(QPIError):
    """Internal state contradicts an invariant (e.g. missing gradient)."""

    exit_code = 3
