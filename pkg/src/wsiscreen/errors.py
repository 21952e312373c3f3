"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class WsiScreenError(Exception):
    exit_code = 1


class ConfigError(WsiScreenError):
    """Invalid configuration, unsatisfiable spec, or bad command usage."""

    exit_code = 1


class DataError(WsiScreenError):
    exit_code = 2


class EmbeddingFormatError(DataError):
    """Raised for malformed EMB1 / PRM1 files. Carries the offending path."""

    def __init__(self, message, path=None):
        self.path = None if path is None else str(path)
        super().__init__(f"{self.path}: {message}" if path is not None else message)


class TruncatedFileError(EmbeddingFormatError):
    pass


class NonFiniteError(DataError):
    pass


class ShapeError(DataError, ValueError):
    pass


class StratificationError(DataError):
    pass


class FileIOError(DataError):
    def __init__(self, message, path):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class NumericError(WsiScreenError):
    """Non-finite loss or gradient during optimization."""

    exit_code = 3


class StageError(WsiScreenError):
    """Pipeline stage failure; wraps the original error with stage context."""

    def __init__(self, stage, cause, last_good=None):
        self.stage = stage
        self.cause = cause
        self.last_good = last_good
        self.exit_code = getattr(cause, "exit_code", 1)
        msg = f"stage '{stage}' failed: {cause}"
        if last_good is not None:
            msg += f" (last good artifact: {last_good})"
        super().__init__(msg)
