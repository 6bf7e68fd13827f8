"""Exception types raised across the package.

Every error derives from AbsaError, which is a ValueError, so callers that
only know the standard library can still catch them.
"""

from typing import Any, Optional, Sequence


class AbsaError(ValueError):
    """Base class for all data, model and numeric errors."""


class DimensionError(AbsaError):
    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = [tuple(s) for s in shapes]


class LabelError(AbsaError):
    def __init__(self, label: int, n_classes: int):
        super().__init__(f"gold label {label} out of range for {n_classes} classes")
        self.label = label
        self.n_classes = n_classes


class NumericError(AbsaError):
    def __init__(self, message: str, parameter: Optional[str] = None):
        if parameter is not None:
            message = f"{message} (parameter '{parameter}')"
        super().__init__(message)
        self.parameter = parameter


class ParseError(AbsaError):
    def __init__(
        self, message: str, path: Any = None, line: Optional[int] = None, column: Optional[int] = None
    ):
        where = str(path) if path is not None else "<input>"
        if line is not None:
            where += f":{line}"
            if column is not None:
                where += f":{column}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line
        self.column = column


class ConfigError(AbsaError):
    pass


class AlignmentError(AbsaError):
    def __init__(self, example_id: str, expected: int, got: int):
        super().__init__(
            f"contextual vectors for example '{example_id}' cover {got} tokens, "
            f"sentence has {expected}"
        )
        self.example_id = example_id


class EncodingConflictError(AbsaError):
    def __init__(self, message: str, items: Sequence[Any] = ()):
        if items:
            message = f"{message}: " + "; ".join(str(item) for item in items)
        super().__init__(message)
        self.items = list(items)


class CheckpointError(AbsaError):
    pass
