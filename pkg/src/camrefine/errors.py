"""Exception hierarchy shared across the package."""


class CamRefineError(Exception):
    """Base class for all package errors."""


class DimensionError(CamRefineError):
    """Shapes or sizes do not satisfy an operation's contract."""


class ContractError(CamRefineError):
    """Input values violate a documented precondition (e.g. negative activations)."""


class ModelError(CamRefineError):
    """Model file or manifest is missing, malformed, or inconsistent."""


class BackendExecutionError(CamRefineError):
    """A forward pass failed inside the graph executor."""

    def __init__(self, message: str, model_path: str | None = None):
        if model_path:
            message = f"{message} (model: {model_path})"
        super().__init__(message)
        self.model_path = model_path


class UnsupportedOperatorError(BackendExecutionError):
    """The graph uses an operator the executor does not implement."""


class SplitDegenerateError(CamRefineError):
    """Image too small to split into patches of the minimum size."""


class MergeCoverageError(CamRefineError):
    """Patch rectangles do not cover every pixel of the target image."""


class DataFormatError(CamRefineError):
    """An on-disk artifact does not match its documented format."""


class UndefinedMetricError(CamRefineError):
    """Metric has no defined value on the given inputs (e.g. no foreground pixels)."""


class UndefinedLossError(CamRefineError):
    """Loss has no defined value on the given inputs (e.g. every pixel ignored)."""
