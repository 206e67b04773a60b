"""Exception taxonomy shared by every module.

The CLI maps these onto exit codes: configuration/contract problems are usage
errors (1), bad data or files are input/format errors (2), and non-finite
numerics are numeric failures (3).
"""


class TaskfuseError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TaskfuseError, ValueError):
    """Tensor shapes are inconsistent with the requested operation."""


class ConfigurationError(TaskfuseError, ValueError):
    """Invalid or conflicting configuration (groups, flags, missing pieces)."""


class ContractError(TaskfuseError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class NumericError(TaskfuseError, ArithmeticError):
    """NaN or Inf showed up where finite values are required."""


class InputError(TaskfuseError, ValueError):
    """User-supplied data is out of range or otherwise unusable."""


class FormatError(TaskfuseError, ValueError):
    """A file does not conform to its declared format."""


class DegenerateBatchError(TaskfuseError, ValueError):
    """Batch statistics were requested over fewer than two values."""
