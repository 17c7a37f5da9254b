"""Exception hierarchy shared by all sobocal modules."""


class SobocalError(Exception):
    """Base class for every error raised by this package."""


class UnsupportedSmoothness(SobocalError, ValueError):
    pass


class InvalidExponent(SobocalError, ValueError):
    pass


class MissingBasis(SobocalError, ValueError):
    pass


class NotPositiveDefinite(SobocalError, ValueError):
    pass


class RankDeficientBasis(SobocalError, ValueError):
    pass


class SelectionFailed(SobocalError, RuntimeError):
    pass


class ShapeError(SobocalError, ValueError):
    pass


class UnsupportedOrder(SobocalError, ValueError):
    pass


class DatasetError(SobocalError, ValueError):
    """Malformed or too-small dataset; ``line`` is the 1-based CSV line if known."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ModelEvaluationError(SobocalError, RuntimeError):
    """A computer model returned non-finite output."""

    def __init__(self, message, theta=None, x=None):
        super().__init__(message)
        self.theta = theta
        self.x = x


class OptimizationFailed(SobocalError, RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class SingularInformation(SobocalError, ValueError):
    pass


class StudyFailed(SobocalError, RuntimeError):
    pass
