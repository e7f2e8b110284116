"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: usage errors exit 1, data errors exit 2,
numeric failures exit 3.
"""


class TagtrimError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(TagtrimError):
    """Bad invocation: invalid flags, missing required inputs, bad config."""

    exit_code = 1


class DataError(TagtrimError):
    """Malformed or inconsistent data files, records, or checkpoints."""

    exit_code = 2


class NumericError(TagtrimError):
    """Non-finite values or other numeric failure states."""

    exit_code = 3
