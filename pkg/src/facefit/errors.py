"""Exception hierarchy shared by every facefit module."""


class FaceFitError(Exception):
    """Base class for all errors raised by facefit."""


class MalformedHeader(FaceFitError):
    pass


class DimensionMismatch(FaceFitError):
    pass


class NonFiniteData(FaceFitError):
    pass


class TruncatedFile(FaceFitError):
    """Raised when a binary file ends early; carries the byte offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DegenerateGeometry(FaceFitError):
    pass


class NearZeroDepth(FaceFitError):
    pass


class EmptyMask(FaceFitError):
    pass


class IndexOutOfRange(FaceFitError):
    pass


class NoCorrespondences(FaceFitError):
    pass


class DegenerateLandmarks(FaceFitError):
    pass


class EmptyAfterMasking(FaceFitError):
    pass
