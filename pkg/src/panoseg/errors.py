"""Exception hierarchy shared by the library and the command line.

Each CLI-facing error carries the process exit code it maps to.
"""


class PanosegError(Exception):
    exit_code = 1


class DimensionError(PanosegError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(PanosegError, FloatingPointError):
    """A NaN or infinity appeared in a tensor."""


class UsageError(PanosegError, ValueError):
    """An API was called outside its contract."""


class ConfigError(PanosegError, ValueError):
    exit_code = 2


class FormatError(PanosegError):
    """Malformed or inconsistent file on disk."""

    exit_code = 2

    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = path


class TrainingError(PanosegError, RuntimeError):
    exit_code = 3

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class InputError(PanosegError, ValueError):
    """Frame or mask data violates a shape or label constraint."""

    exit_code = 2


class PropagationInputError(InputError):
    exit_code = 4


class EvaluationError(PanosegError):
    exit_code = 5
