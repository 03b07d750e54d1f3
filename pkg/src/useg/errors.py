"""Exception types shared across the package."""


class UsegError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(UsegError, ValueError):
    pass


class InvalidAttr(UsegError, ValueError):
    pass


class NonFinite(UsegError, FloatingPointError):
    pass


class NotScalar(UsegError, ValueError):
    pass


class NoGraph(UsegError, RuntimeError):
    pass


class MissingGrad(UsegError, KeyError):
    pass


class StepOutOfRange(UsegError, ValueError):
    pass


class EmptyText(UsegError, ValueError):
    pass


class AllPadded(UsegError, ValueError):
    pass


class MissingText(UsegError, ValueError):
    pass


class ModeNone(UsegError, ValueError):
    pass


class NonBinaryTarget(UsegError, ValueError):
    pass


class LengthMismatch(UsegError, ValueError):
    pass


class TooFewPairs(UsegError, ValueError):
    pass


class EmptyCaseList(UsegError, ValueError):
    pass


class PlacementFailure(UsegError, RuntimeError):
    pass


class TooFewPatients(UsegError, ValueError):
    pass


class CorruptManifest(UsegError, ValueError):
    pass


class ChecksumMismatch(UsegError, ValueError):
    pass


class MissingFile(UsegError, FileNotFoundError):
    pass


class InvalidConfig(UsegError, ValueError):
    pass


class DatasetMissing(UsegError, FileNotFoundError):
    pass


class SplitEmpty(UsegError, ValueError):
    pass


class CaseMismatch(UsegError, ValueError):
    pass
