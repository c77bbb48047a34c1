"""Exception types raised across the package."""


class SiamMoError(Exception):
    pass


class MalformedFile(SiamMoError, ValueError):
    pass


class ShapeMismatch(SiamMoError, ValueError):
    pass


class NonScalarLoss(SiamMoError, ValueError):
    pass


class EmptyInput(SiamMoError, ValueError):
    pass


class LengthMismatch(SiamMoError, ValueError):
    pass


class FrameOutOfRange(SiamMoError, IndexError):
    pass


class EmptyDataset(SiamMoError, ValueError):
    pass
