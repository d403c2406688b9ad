"""Exception hierarchy shared across the toolkit."""


class DiffColorError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(DiffColorError):
    pass


class SizeMismatch(DiffColorError):
    pass


class DimensionMismatch(DiffColorError):
    pass


class EmptyNegatives(DiffColorError):
    pass


class ZeroVector(DiffColorError):
    pass


class InvalidSchedule(DiffColorError):
    pass


class NonFiniteLoss(DiffColorError):
    """Raised when a training loss becomes NaN/Inf; carries step diagnostics."""

    def __init__(self, message, step=None, diagnostics=None):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics or {}


class BackendFrozenViolation(DiffColorError):
    pass


class ChecksumMismatch(DiffColorError):
    pass


class EtaOutOfRange(DiffColorError):
    pass


class OverlappingSpans(DiffColorError):
    pass


class UnknownObject(DiffColorError):
    pass


class SessionIncomplete(DiffColorError):
    pass


class TooSmall(DiffColorError):
    pass


class InsufficientSamples(DiffColorError):
    pass


class LengthMismatch(DiffColorError):
    pass


class MissingPair(DiffColorError):
    pass
