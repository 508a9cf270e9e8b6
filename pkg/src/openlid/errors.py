"""Exception hierarchy shared by every pipeline stage.

Each class carries the process exit code the CLI maps it to.
"""


class LidError(Exception):
    exit_code = 1


class ConfigError(LidError):
    exit_code = 2


class MalformedName(LidError):
    exit_code = 3


class DecodeError(LidError):
    exit_code = 4


class InsufficientData(LidError):
    exit_code = 5

    def __init__(self, message, languages=None):
        super().__init__(message)
        self.languages = dict(languages or {})


class ShapeError(LidError, ValueError):
    exit_code = 6


class RegistryMismatch(LidError):
    exit_code = 7


class VersionMismatch(LidError):
    exit_code = 8


class NonFiniteLoss(LidError, FloatingPointError):
    exit_code = 9

    def __init__(self, batch_id, loss, max_grad):
        super().__init__(
            f"non-finite loss in batch {batch_id}: loss={loss!r}, max |grad|={max_grad!r}"
        )
        self.batch_id = batch_id
        self.loss = loss
        self.max_grad = max_grad


class EmptyInput(LidError, ValueError):
    exit_code = 10


class DegenerateBatch(LidError):
    exit_code = 11


class StratificationError(LidError):
    exit_code = 12

    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id


class DuplicateCode(LidError):
    exit_code = 13


class InsufficientExamples(LidError):
    exit_code = 14


class RangeError(LidError, ValueError):
    exit_code = 15


class IoError(LidError, OSError):
    exit_code = 16


EXIT_CODES = {
    cls.__name__: cls.exit_code
    for cls in (
        LidError, ConfigError, MalformedName, DecodeError, InsufficientData,
        ShapeError, RegistryMismatch, VersionMismatch, NonFiniteLoss, EmptyInput,
        DegenerateBatch, StratificationError, DuplicateCode, InsufficientExamples,
        RangeError, IoError,
    )
}
