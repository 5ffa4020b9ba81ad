"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code so callers can tell
configuration mistakes from bad data and from runtime failures.
"""


class IncsegError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(IncsegError):
    """Invalid scenario spec, hyperparameter, or CLI flag combination."""

    exit_code = 2


class DataError(IncsegError):
    """Malformed dataset content (illegal label values, missing masks)."""

    exit_code = 3


class TrainingError(IncsegError):
    """Runtime failure inside a training step (non-finite loss, bad checkpoint)."""

    exit_code = 4
