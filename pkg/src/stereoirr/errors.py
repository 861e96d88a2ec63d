"""Exception types shared across the package.

The CLI maps these onto exit codes: usage/configuration problems exit 1,
data and file-format problems exit 2, numeric failures exit 3.
"""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class ConfigError(ValueError):
    """Bad configuration value, unknown key, or incompatible config pair."""


class FormatError(ValueError):
    """Malformed file content. Carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(FormatError):
    """Checkpoint file is malformed, truncated, or incompatible."""


class DataError(ValueError):
    """Dataset-level problem: missing files, bad manifest, refused overwrite."""


class NumericsError(ArithmeticError):
    """Non-finite value where the training contract requires finite ones."""
