"""Exception hierarchy shared across the pipeline.

Each class maps to one CLI exit code so failures are scriptable:
config=2, data=3, numeric=4, io/format=5.
"""


class CausadisError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(CausadisError):
    """Invalid, missing, or unknown configuration."""

    exit_code = 2


class DataError(CausadisError):
    """Dataset structure violates an invariant (triplet infeasibility etc.)."""

    exit_code = 3


class NumericError(CausadisError):
    """Non-finite values detected during optimization."""

    exit_code = 4


class FormatError(CausadisError):
    """Corrupt, truncated, or incompatible on-disk artifacts."""

    exit_code = 5
