"""Exception taxonomy shared by all modules.

Each class maps to one error category named in the operation contracts;
the CLI turns them into nonzero exit codes with the offending field in
the message.
"""


class MoglmError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(MoglmError):
    """Operand shapes do not conform."""


class NumericError(MoglmError):
    """NaN/Inf appeared, or dtypes are inconsistent."""


class ConfigError(MoglmError):
    """A configuration field has an invalid value."""


class DataError(MoglmError):
    """Corpus or token stream is unusable (empty, out-of-range ids, too short)."""


class FormatError(MoglmError):
    """A checkpoint or range file cannot be decoded."""


class UsageError(MoglmError):
    """An API or CLI call sequence that is never valid."""
