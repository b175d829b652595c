"""Exception hierarchy shared by all stages."""


class WarpfitError(Exception):
    """Base class for every error raised by this package."""


# prep
class TooFewPoints(WarpfitError):
    pass


class SingularFit(WarpfitError):
    pass


class ParseError(WarpfitError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateId(WarpfitError):
    pass


class MissingCovariate(WarpfitError):
    pass


# simplex / register
class ZeroIncrement(WarpfitError):
    pass


class NonMonotone(WarpfitError):
    pass


class OptimizerDiverged(WarpfitError):
    pass


class DegenerateCurve(WarpfitError):
    pass


class EmptyPool(WarpfitError):
    pass


class NonPositiveCurve(WarpfitError):
    pass


# fpca
class DegenerateSample(WarpfitError):
    pass


class GridMismatch(WarpfitError):
    pass


# mvlme
class RankDeficientDesign(WarpfitError):
    pass


class MissingLevel(WarpfitError):
    pass


class NotPositiveDefinite(WarpfitError):
    pass


class NumericalBreakdown(WarpfitError):
    pass


class NoConvergence(WarpfitError):
    pass


class TooLarge(WarpfitError):
    pass


# pipeline
class InvalidSpec(WarpfitError):
    pass


class InvalidConfig(WarpfitError):
    pass


class UnknownId(WarpfitError):
    pass


class StageError(WarpfitError):
    """Wraps an error raised inside a pipeline stage, naming the stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
