"""Exception hierarchy shared by all dura modules."""


class DuraError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DuraError, ValueError):
    pass


class DimensionMismatch(ShapeError):
    pass


class ShapeMismatch(ShapeError):
    pass


class ZeroVector(DuraError, ValueError):
    pass


class EmptyInput(DuraError, ValueError):
    pass


class NonPositiveTemperature(DuraError, ValueError):
    pass


class KOutOfRange(DuraError, ValueError):
    pass


class NonFiniteFunction(DuraError, ArithmeticError):
    pass


class InvalidSimilarity(DuraError, ValueError):
    pass


class EmptyEvidence(EmptyInput):
    pass


class OffSimplex(DuraError, ValueError):
    pass


class NonPositiveAlpha(DuraError, ValueError):
    pass


class NotOneHot(DuraError, ValueError):
    pass


class IndexOutOfRange(DuraError, IndexError):
    pass


class NoNegatives(DuraError, ValueError):
    pass


class StaleTape(DuraError, RuntimeError):
    pass


class InfeasibleMargin(DuraError, RuntimeError):
    pass


class DerangementInfeasible(DuraError, RuntimeError):
    pass


class EmptyScores(EmptyInput):
    pass


class NoQueries(DuraError, ValueError):
    pass


class QueryWithoutRelevant(DuraError, ValueError):
    pass


class Divergence(DuraError, RuntimeError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the path of the last good checkpoint, if one was
    written.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class ConfigError(DuraError, ValueError):
    pass


class FormatError(DuraError, ValueError):
    """A serialized file has the wrong magic, version or layout."""
