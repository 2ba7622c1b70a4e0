"""Exception types raised across the package."""


class TiqatError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    @property
    def code(self) -> str:
        return type(self).__name__


class ShapeMismatch(TiqatError, ValueError):
    pass


class DoubleBackward(TiqatError, RuntimeError):
    pass


class SequenceTooLong(TiqatError, ValueError):
    pass


class NonFiniteInput(TiqatError, ValueError):
    pass


class PlanMismatch(TiqatError, ValueError):
    pass


class IterOutOfRange(TiqatError, IndexError):
    pass


class NonFiniteLoss(TiqatError, FloatingPointError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NonFiniteGradient(TiqatError, FloatingPointError):
    pass


class CheckpointMismatch(TiqatError, ValueError):
    pass


class DatasetMissing(TiqatError, FileNotFoundError):
    pass


class IndexOutOfRange(TiqatError, IndexError):
    pass


class ParseError(TiqatError, ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        loc = "" if line is None else f" (line {line}, column {column or 1})"
        super().__init__(message + loc)
        self.line = line
        self.column = column


class ConfigError(TiqatError, ValueError):
    """Invalid configuration; ``pointer`` is a JSON pointer to the field."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer}: {message}")
        self.pointer = pointer
        self.message = message
