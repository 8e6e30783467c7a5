"""Exception types raised across the package."""


class SlamError(Exception):
    """Base class for all pipeline errors."""


class NonPositiveDepth(SlamError, ValueError):
    pass


class EmptyDepth(SlamError, ValueError):
    pass


class SingularSystem(SlamError, ArithmeticError):
    """Reduced normal equations are rank-deficient beyond the gauge freedom."""


class DegenerateFit(SlamError, ValueError):
    """Scale/shift regression is unidentifiable (constant regressor or too few samples)."""


class MissingProxyDepth(SlamError, KeyError):
    pass


class InvalidSpec(SlamError, ValueError):
    pass


class InvalidInput(SlamError, ValueError):
    pass


class EmptyOverlap(SlamError, ValueError):
    pass


class DegenerateGeometry(SlamError, ValueError):
    pass


class DimensionMismatch(SlamError, ValueError):
    pass


class IoError(SlamError, OSError):
    pass


class PipelineError(SlamError, RuntimeError):
    """Wraps a sub-error with the frame and stage at which it happened."""

    def __init__(self, frame, stage, cause):
        self.frame = frame
        self.stage = stage
        self.cause = cause
        super().__init__(f"frame {frame}, stage '{stage}': {type(cause).__name__}: {cause}")
