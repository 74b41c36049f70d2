"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to.
"""


class CascadeError(Exception):
    exit_code = 1


class ConfigurationError(CascadeError):
    """Bad shapes, layer specs or config values."""

    exit_code = 1


class DataError(CascadeError):
    """Invalid labels, out-of-range scores and similar input problems."""

    exit_code = 2


class FormatError(DataError):
    """Malformed patchset or model file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SamplingError(DataError):
    pass


class SplitError(DataError):
    pass


class RoutingError(DataError):
    """A candidate has no fold in the model's fold assignment."""


class EvaluationError(DataError):
    pass


class TrainingError(CascadeError):
    """Training set cannot produce a usable classifier (e.g. one class only)."""

    exit_code = 2


class NumericError(CascadeError):
    exit_code = 3
