"""Exception hierarchy.

Validation-type failures derive from :class:`ValidationError` (CLI exit 1);
I/O and integrity failures derive from :class:`StorageError` (CLI exit 2).
"""


class PDForgeError(Exception):
    pass


class ValidationError(PDForgeError, ValueError):
    pass


class InvalidInputError(ValidationError):
    pass


class InvalidParameterError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ScheduleRangeError(ValidationError):
    pass


class ShardIndexError(ValidationError, IndexError):
    pass


class TrainingDivergenceError(PDForgeError, RuntimeError):
    def __init__(self, message: str, step: int | None = None, tensor: str | None = None):
        super().__init__(message)
        self.step = step
        self.tensor = tensor


class StorageError(PDForgeError, OSError):
    pass


class CorruptionError(StorageError):
    def __init__(self, message: str, sequence_index: int | None = None):
        super().__init__(message)
        self.sequence_index = sequence_index


class CheckpointError(StorageError):
    pass
