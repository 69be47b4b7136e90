"""Exception types shared across the pipeline.

Every error raised on a contract violation derives from PipelineError so
callers (and the CLI) can distinguish pipeline faults from programming bugs.
"""


class PipelineError(Exception):
    """Base class for all pipeline contract violations."""


class FilterSpecError(PipelineError):
    """Invalid filter specification (e.g. cutoff at or above Nyquist)."""


class SignalTooShortError(PipelineError):
    """Signal shorter than the filter settling / padding requirement."""


class UnsupportedRatioError(PipelineError):
    """Downsampling ratio is not a positive integer."""


class InsufficientDataError(PipelineError):
    """Too few samples or observations for the requested estimate."""


class ShapeMismatchError(PipelineError):
    """Arrays that must align (length, rate, or width) do not."""


class NoSignalError(PipelineError):
    """Flat or empty input where a physiological signal is required."""


class InvalidIntervalError(PipelineError):
    """Time interval with non-positive duration or reversed bounds."""


class SolverConvergenceError(PipelineError):
    """Optimizer hit its iteration cap before meeting tolerance."""

    def __init__(self, message: str, iterations: int, duality_gap: float):
        super().__init__(message)
        self.iterations = iterations
        self.duality_gap = duality_gap


class MissingChannelError(PipelineError):
    """A required channel is absent from the session."""


class InvalidBaselineError(PipelineError):
    """Baseline interval empty, too short, or fully degenerate."""


class UnimputableColumnError(PipelineError):
    """A feature column has too few observed values to impute from."""


class DegenerateLabelsError(PipelineError):
    """Training labels contain fewer than two classes."""


class UndefinedMetricError(PipelineError):
    """Metric undefined for the given inputs (e.g. an empty class)."""


class UndefinedTestError(PipelineError):
    """Statistical test undefined for the given inputs."""


class RankDeficiencyError(PipelineError):
    """Design matrix is rank deficient (or too few groups)."""


class InsufficientRecoveryError(PipelineError):
    """Recovery phase shorter than the minimum analyzable duration."""


class SessionParseError(PipelineError):
    """Malformed session file; carries file/line/field context."""

    def __init__(self, message: str, path: str = "", line: int = -1, field: str = ""):
        super().__init__(message)
        self.path = path
        self.line = line
        self.field = field


class ConfigValidationError(PipelineError):
    """Invalid run configuration; carries the offending field names."""

    def __init__(self, message: str, fields: tuple = ()):
        super().__init__(message)
        self.fields = tuple(fields)
