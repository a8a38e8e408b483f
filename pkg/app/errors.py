from __future__ import annotations

from typing import Any, Optional, Sequence


EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class TCTransError(Exception):
    exit_code = EXIT_INTERNAL


class ConfigError(TCTransError):
    exit_code = EXIT_CONFIG


class ShapeError(TCTransError, ValueError):
    """Raised when operand extents are incompatible; the message lists every shape involved."""

    exit_code = EXIT_CONFIG

    def __init__(self, op: str, message: str, shapes: Sequence[Sequence[int]] = ()) -> None:
        report = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: {message}" + (f" [shapes: {report}]" if report else ""))
        self.op = op
        self.shapes = [tuple(s) for s in shapes]


class DataError(TCTransError):
    exit_code = EXIT_DATA


class DatasetFormatError(DataError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class CorruptFileError(DatasetFormatError):
    pass


class IntegrityError(DataError):
    pass


class GeometryError(DataError):
    pass


class EmptyStructureError(DataError, ValueError):
    pass


class NumericError(TCTransError):
    exit_code = EXIT_NUMERIC


class TrainingAborted(NumericError):
    def __init__(self, message: str, last_good: Any = None, log: Optional[Any] = None) -> None:
        super().__init__(message)
        self.last_good = last_good
        self.log = log


class GradCheckFailed(NumericError):
    pass
