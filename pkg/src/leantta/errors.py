"""Exception hierarchy shared by every module.

The CLI maps each class to an exit code via ``category``.
"""


class LeanTTAError(Exception):
    category = "error"


class ShapeError(LeanTTAError, ValueError):
    category = "shape"


class ConfigError(LeanTTAError, ValueError):
    category = "config"


class NumericError(LeanTTAError, ArithmeticError):
    category = "numeric"

    def __init__(self, message, layer_id=None):
        super().__init__(message)
        self.layer_id = layer_id


class FormatError(LeanTTAError):
    """Malformed binary container; ``offset`` is the byte position of the fault."""

    category = "file"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    category = "file"


class TrainingError(NumericError):
    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch
