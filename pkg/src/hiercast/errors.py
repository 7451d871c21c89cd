"""Exception hierarchy used across the package."""


class HierarchyError(ValueError):
    pass


class CycleError(HierarchyError):
    pass


class DisconnectedError(HierarchyError):
    pass


class MultiParentError(HierarchyError):
    pass


class ZeroWeightError(HierarchyError):
    pass


class MissingLeafError(HierarchyError):
    pass


class NoInternalNodeError(HierarchyError):
    pass


class DataError(ValueError):
    pass


class UnknownNodeError(DataError, KeyError):
    pass


class NonMonotoneTimeError(DataError):
    pass


class ParseError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class ZeroVarianceLeafError(DataError):
    pass


class EmptyWindowSetError(DataError):
    pass


class EmptyChildrenError(ValueError):
    pass


class DegenerateSamplesError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


class EmptyCorrelationSetError(ValueError):
    pass


class NaNLossError(RuntimeError):
    """Raised when a training loss becomes non-finite.

    ``epoch`` and ``phase`` locate the failure for the diagnostic message.
    """

    def __init__(self, message, epoch=None, phase=None):
        super().__init__(message)
        self.epoch = epoch
        self.phase = phase


class UnknownVariantError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CheckpointMismatchError(RuntimeError):
    pass


class SchemaVersionError(RuntimeError):
    pass
