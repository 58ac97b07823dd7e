"""Exception types shared across the package.

The split matters for the command line tool: `DataError` maps to exit code 3
(unreadable or malformed inputs) and `ModelError` maps to exit code 4
(model/index configuration problems).  Everything that is a plain misuse of an
API keeps raising `ValueError`.
"""


class AusilError(Exception):
    """Base class for package-specific failures."""


class DataError(AusilError):
    """Input data is missing, unreadable, or malformed."""


class ModelError(AusilError):
    """Model or index is inconsistent with the requested operation."""


class TrainingDivergedError(AusilError):
    """Optimization produced a non-finite loss."""
