"""Exception hierarchy shared across the package.

CLI exit codes map onto these: ConfigError -> 1 (usage), ParseError /
ConflictError / DataError -> 2 (data), NumericalError -> 3 (numerics).
"""


class TinyIRError(Exception):
    """Base class for all package errors."""


class ParseError(TinyIRError):
    """Malformed input file (bad JSONL line, bad qrels row, ...)."""


class ConflictError(TinyIRError):
    """Duplicate identifier where uniqueness is required."""


class DataError(TinyIRError):
    """Inconsistent or missing data (unknown doc id, corpus too small, ...)."""


class ContextOverflowError(DataError):
    """Sequence longer than the model's maximum context; never truncated silently."""


class ShapeError(TinyIRError):
    """Tensor shape mismatch; message names both shapes."""


class NumericalError(TinyIRError):
    """NaN gradients, degenerate softmax rows, failed gradient checks."""


class ConfigError(TinyIRError):
    """Invalid configuration value or unknown config key."""
