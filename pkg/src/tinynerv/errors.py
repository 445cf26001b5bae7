"""Exception hierarchy shared by the library and the command-line front end."""


class TinyNervError(Exception):
    exit_code = 1


class InputError(TinyNervError, ValueError):
    """Bad user-supplied data (shapes, value ranges, frame files)."""

    exit_code = 2


class ConfigurationError(TinyNervError, ValueError):
    """Inconsistent architecture, policy or run configuration."""

    exit_code = 3


class StorageError(TinyNervError, OSError):
    """A file could not be read or written."""

    exit_code = 4


class UsageError(TinyNervError, RuntimeError):
    """An API or command was invoked in a state that does not allow it."""

    exit_code = 5


class FormatError(TinyNervError, ValueError):
    """A checkpoint or packed payload is malformed."""

    exit_code = 6


class TrainingDiverged(TinyNervError, FloatingPointError):
    exit_code = 7
