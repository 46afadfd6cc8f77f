"""
Exception hierarchy shared by the library and the command line.

Every error carries a stable ``category`` string and the process exit code
the CLI uses for it.
"""
from typing import Optional


class AttnFDError(Exception):
    category = "internal"
    exit_code = 1


class ConfigurationError(AttnFDError, ValueError):
    category = "config"
    exit_code = 3


class MissingFileError(AttnFDError, FileNotFoundError):
    category = "missing-file"
    exit_code = 4


class TapMismatchError(ConfigurationError):
    category = "tap"
    exit_code = 5


class ParseError(AttnFDError, ValueError):
    category = "parse"
    exit_code = 6

    def __init__(self, message: str, offset: Optional[int] = None) -> None:
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConsistencyError(AttnFDError, ValueError):
    category = "consistency"
    exit_code = 6


class CheckpointError(AttnFDError, ValueError):
    category = "checkpoint"
    exit_code = 7


class NonFiniteError(AttnFDError, ArithmeticError):
    category = "non-finite"
    exit_code = 8

    def __init__(self, message: str, step: Optional[int] = None) -> None:
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)
        self.step = step


class DimensionError(AttnFDError, ValueError):
    category = "dimension"
    exit_code = 9


class GeometryError(AttnFDError, ValueError):
    category = "geometry"
    exit_code = 9


class LabelError(AttnFDError, ValueError):
    category = "label"
    exit_code = 9


class ContractError(AttnFDError, ValueError):
    category = "contract"
    exit_code = 9


class EmptyEvaluationError(AttnFDError, ValueError):
    category = "empty-evaluation"
    exit_code = 10
