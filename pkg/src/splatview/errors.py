"""Exception types raised across the package."""


class SplatviewError(Exception):
    """Base class for all package errors."""


class BehindCamera(SplatviewError):
    pass


class InvalidDepth(SplatviewError):
    pass


class InvalidCamera(SplatviewError):
    pass


class EmptyCloud(SplatviewError):
    pass


class InvalidFraction(SplatviewError):
    pass


class ShapeError(SplatviewError, ValueError):
    pass


class EmptyOverlap(SplatviewError):
    pass


class RangeError(SplatviewError, ValueError):
    pass


class EmptyMask(SplatviewError):
    pass


class AllInvalid(SplatviewError):
    pass


class NumericalDivergence(SplatviewError):
    """Raised when a fit produces a non-finite loss.

    The partial trace up to and including the failing step is attached as
    ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
