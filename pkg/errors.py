"""
CrossFundus errors
One hierarchy for every failure the library reports
"""

from typing import Optional, Sequence


class CrossFundusError(Exception):
    """Base class; `kind` is the short machine-parseable reason tag"""

    kind = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        return f"error: {self.kind}: {self.message}"


class ShapeError(CrossFundusError):
    kind = "shape_mismatch"

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = ""):
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: incompatible shapes {shown}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)
        self.op = op
        self.shapes = [tuple(s) for s in shapes]


class NonFiniteError(CrossFundusError):
    kind = "non_finite"


class GraphError(CrossFundusError):
    kind = "graph"


class ConfigError(CrossFundusError):
    kind = "config"

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class DatasetFormatError(CrossFundusError):
    kind = "dataset_format"


class BadMagicError(DatasetFormatError):
    kind = "bad_magic"


class TruncatedFileError(DatasetFormatError):
    kind = "truncated"


class VersionMismatchError(DatasetFormatError):
    kind = "version_mismatch"


class CheckpointError(CrossFundusError):
    kind = "checkpoint"


class SplitError(CrossFundusError):
    kind = "split"


class AugmentError(CrossFundusError):
    kind = "augment"


class UndefinedMetricError(CrossFundusError):
    kind = "undefined_metric"


class GradientCheckError(CrossFundusError):
    kind = "gradient_check"

    def __init__(self, message: str, param_name: Optional[str] = None):
        super().__init__(message)
        self.param_name = param_name
