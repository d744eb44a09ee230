"""Exception taxonomy shared by the library and the CLI.

Each branch carries the process exit code the CLI maps it to, so library
code can raise precise errors without knowing about the command layer.
"""


class ScgError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class UsageError(ScgError):
    """Bad arguments, flags, or configuration values."""

    exit_code = 1


class ConfigError(UsageError):
    """Invalid network or training configuration."""


class DataError(ScgError):
    """Malformed datasets, masks, palettes, or on-disk layouts."""

    exit_code = 2


class ShapeError(DataError):
    """Tensor or image dimensions violate an operation's contract."""


class CheckpointError(DataError):
    """Corrupt, missing, or tampered checkpoint files."""


class NumericError(ScgError):
    """Non-finite values where finite ones are required."""

    exit_code = 3


class IOFailure(ScgError):
    """Filesystem read/write failure, with the offending path in the message."""

    exit_code = 4
