"""Exception types shared across the package.

Each class carries a distinct CLI exit code so scripts can tell failures apart.
"""


class SparseAudioError(Exception):
    exit_code = 1


class ConfigError(SparseAudioError, ValueError):
    """Invalid configuration or parameter values."""

    exit_code = 2


class ShapeError(SparseAudioError, ValueError):
    exit_code = 2


class DomainError(SparseAudioError, ValueError):
    exit_code = 2


class StateError(SparseAudioError, RuntimeError):
    exit_code = 3


class FormatError(SparseAudioError, ValueError):
    """A binary container or CSV file does not match the expected layout."""

    exit_code = 4


class IngestionError(SparseAudioError, IOError):
    exit_code = 4

    def __init__(self, message, path=None):
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path


class NormalizationError(SparseAudioError, ValueError):
    exit_code = 5


class AdaptationError(SparseAudioError, ArithmeticError):
    exit_code = 6

    def __init__(self, message, channel=None):
        if channel is not None:
            message = f"{message} (channel {channel})"
        super().__init__(message)
        self.channel = channel


class TrainingError(SparseAudioError, ArithmeticError):
    exit_code = 7
