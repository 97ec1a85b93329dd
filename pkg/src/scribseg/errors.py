"""Exception taxonomy mapped to CLI exit codes."""


class ScribsegError(Exception):
    """Base class; `exit_code` drives the CLI's process status."""

    exit_code = 1


class ConfigurationError(ScribsegError):
    """Bad usage: unknown keys, invalid values, shape mismatches."""

    exit_code = 1


class DataError(ScribsegError):
    """Malformed files, manifest violations, invalid label inputs."""

    exit_code = 2


class ClampViolationError(DataError):
    """A labeling altered a seed pixel the CRF must keep fixed."""


class NumericError(ScribsegError):
    """Non-finite values or failed numeric procedures."""

    exit_code = 3


class SolverError(NumericError):
    """A linear solver did not converge within its iteration budget."""
