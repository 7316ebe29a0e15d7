"""Exception types raised across the package."""


class AdaptorError(Exception):
    """Base class for every error raised by this package."""


class FormatError(AdaptorError, ValueError):
    pass


class DimMismatch(AdaptorError, ValueError):
    pass


class DuplicateId(AdaptorError, ValueError):
    pass


class DuplicatePair(AdaptorError, ValueError):
    pass


class NegativeGrade(AdaptorError, ValueError):
    pass


class TooFewQueries(AdaptorError, ValueError):
    pass


class PrefixOutOfRange(AdaptorError, ValueError):
    pass


class CorpusTooSmall(AdaptorError, ValueError):
    pass


class DuplicateDoc(AdaptorError, ValueError):
    pass


class InvalidNeighborIndex(AdaptorError, IndexError):
    pass


class BatchTooSmall(AdaptorError, ValueError):
    pass


class NoPositivePairs(AdaptorError, ValueError):
    pass


class UnknownId(AdaptorError, KeyError):
    pass


class UnknownMethod(AdaptorError, ValueError):
    pass


class EmptyInput(AdaptorError, ValueError):
    pass


class RemoteError(AdaptorError, RuntimeError):
    """Remote provider still failing after all retry attempts."""


class RankDeficientWarning(UserWarning):
    """PCA fit found fewer non-zero eigenvalues than requested components."""
