"""Shared exception types. The CLI maps each to a distinct exit code."""


class UsageError(Exception):
    """Bad invocation: unknown flags, missing arguments, malformed values."""


class DataError(Exception):
    """Broken inputs: missing files, unpaired images, corrupt containers."""


class NumericError(Exception):
    """Numeric failure: NaN/Inf losses, failed gradient checks."""
