class DSNError(Exception):
    """Base class of every error raised by the serial-number toolkit.

    `exit_code` is what the command-line entry point returns when the error
    escapes a command.
    """

    exit_code: int = 1


class ConfigError(DSNError):
    exit_code = 2


class UnknownArchitectureError(ConfigError, LookupError):
    pass


class SpecValidationError(ConfigError, ValueError):
    pass


class GeometryError(DSNError, ValueError):
    exit_code = 2


class DomainError(DSNError, ValueError):
    exit_code = 2


class ShapeError(DSNError, ValueError):
    exit_code = 2


class ArgumentError(DSNError, ValueError):
    exit_code = 2


class DataError(DSNError, ValueError):
    exit_code = 2


class SignatureFormatError(DSNError, ValueError):
    exit_code = 2


class MissingInputError(DSNError):
    exit_code = 3


class KeyMaterialError(MissingInputError):
    pass


class DataIngestionError(MissingInputError):
    def __init__(self, message: str, paths=()):
        self.paths = [str(p) for p in paths]
        if self.paths:
            message = f"{message}: {', '.join(self.paths)}"
        super().__init__(message)


class StageError(DSNError):
    exit_code = 4


class RunLockedError(DSNError):
    exit_code = 4


class TrainingDivergenceError(DSNError):
    exit_code = 5

    def __init__(self, epoch: int, message: str = "loss became NaN"):
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})")
