"""Exception types raised across the package."""


class DualGlanceError(Exception):
    """Base class for all package errors."""


class DegenerateBox(DualGlanceError, ValueError):
    pass


class EmptyVotes(DualGlanceError, ValueError):
    pass


class UnknownClass(DualGlanceError, KeyError):
    pass


class ZeroCount(DualGlanceError, ValueError):
    pass


class MismatchedTarget(DualGlanceError, ValueError):
    pass


class EmptyBag(DualGlanceError, ValueError):
    pass


class DimensionMismatch(DualGlanceError, ValueError):
    pass


class RegionOutsideMap(DualGlanceError, ValueError):
    pass


class InvalidSpec(DualGlanceError, ValueError):
    pass


class EmptySplit(DualGlanceError, ValueError):
    pass


class NoPositives(DualGlanceError, ValueError):
    pass


class LengthMismatch(DualGlanceError, ValueError):
    pass


class NoRecords(DualGlanceError, ValueError):
    pass


class DataError(DualGlanceError, ValueError):
    pass


class DivergenceDetected(DualGlanceError, RuntimeError):
    pass


class IncompatibleCheckpoint(DualGlanceError, ValueError):
    pass


class MissingSplit(DualGlanceError, KeyError):
    pass
