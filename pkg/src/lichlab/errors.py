"""Exception types raised across the package."""


class LichLabError(Exception):
    """Base class for all package errors."""


class InvalidGrid(LichLabError):
    pass


class NonFiniteSample(LichLabError):
    pass


class PoleSingularity(LichLabError):
    pass


class StencilOutOfDomain(LichLabError):
    pass


class SolverDiverged(LichLabError):
    pass


class SingularOperator(LichLabError):
    pass


class IncompatibleData(LichLabError):
    pass


class DegenerateBasis(LichLabError):
    pass


class CoincidentPoints(LichLabError):
    pass


class TooCloseToBoundary(LichLabError):
    pass


class NonPositiveF(LichLabError):
    pass


class NonPositiveField(LichLabError):
    pass


class PositivityLost(LichLabError):
    pass


class NotBracketing(LichLabError):
    pass


class OuterStalled(LichLabError):
    pass


class NoCriticalPoints(LichLabError):
    pass


class DomainTooSmall(LichLabError):
    pass


class UnknownSuite(LichLabError):
    pass


class ConfigError(LichLabError):
    """Problem-definition parse failure; carries a line/column when known."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)


class ZeroBWarning(UserWarning):
    """pi vanishes identically, so the nonvanishing hypothesis on b fails."""
