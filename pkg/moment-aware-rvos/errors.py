"""Exception hierarchy shared by all modules of the project.

Every error raised on purpose derives from ``MomentRvosError`` and carries the
process exit code the command line reports for it.
"""


class MomentRvosError(Exception):
    """Base class for all project errors."""
    exit_code = 4


class ConfigError(MomentRvosError):
    """Invalid run configuration or command-line arguments."""
    exit_code = 2


class DataError(MomentRvosError):
    """Malformed, missing or inconsistent input data."""
    exit_code = 3


class ComputeError(MomentRvosError):
    """Failure while computing (shapes, tapes, routing rules)."""
    exit_code = 4
