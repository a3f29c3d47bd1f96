"""
Typed errors raised across the package.

Every error is a ValueError so callers that only know the standard library
can still catch them. The two families decide the command-line exit code:
DataError -> 3, NumericError -> 4.
"""


class AttnScopeError(ValueError):
    """Base class of every error raised by attnscope."""

    exit_code = 1


# =========================
# data / validation errors
# =========================

class DataError(AttnScopeError):
    exit_code = 3


class MalformedRecord(DataError):
    pass


class NonMonotonicTime(DataError):
    pass


class EmptySession(DataError):
    pass


class BadCoordinate(DataError):
    pass


class BadMagic(DataError):
    pass


class UnsupportedVersion(DataError):
    pass


class DimMismatch(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class GridMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class OutOfBounds(DataError):
    pass


class GradeOutOfDomain(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class EmptyDataset(DataError):
    pass


class SingleClass(DataError):
    pass


class NoSessions(DataError):
    pass


class TooFewGroups(DataError):
    pass


class InvalidProfileOrder(DataError):
    pass


class MissingInputs(DataError):
    pass


class ConfigError(DataError):
    pass


# =========================
# numeric / degenerate-input errors
# =========================

class NumericError(AttnScopeError):
    exit_code = 4


class EmptyAfterFilter(NumericError):
    pass


class DegenerateMap(NumericError):
    pass


class ZeroMap(NumericError):
    pass


class EmptyFixations(NumericError):
    pass


class TooFewMaps(NumericError):
    pass


class TooFewGrades(NumericError):
    pass


class TooFewPoints(NumericError):
    pass


class ConstantInput(NumericError):
    pass


class NonScalarLoss(NumericError):
    pass


class HeadDivisibility(NumericError):
    pass


class InputTooSmall(NumericError):
    pass


class DegeneratePrediction(NumericError):
    pass
