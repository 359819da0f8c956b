"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 2, data problems
exit 3, numerical failures exit 4.
"""


class TbiganError(Exception):
    """Base class for all package errors."""


class ContractError(TbiganError, ValueError):
    """An operation was called with arguments violating its contract."""


class UsageError(TbiganError):
    """Invalid user-facing configuration or command usage."""


class DataError(TbiganError):
    """Base class for dataset problems."""


class IngestionError(DataError):
    """A dataset archive is missing or unreadable."""


class SplitError(DataError):
    """A split cannot be carved out (e.g. a class is too small)."""


class SelectionError(DataError):
    """A labeled-subset selection request cannot be satisfied."""


class CheckpointError(TbiganError):
    """A checkpoint file is corrupt, truncated, or version-incompatible."""


class NumericalError(TbiganError):
    """Training produced a non-finite loss."""
