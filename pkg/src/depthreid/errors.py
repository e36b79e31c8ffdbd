"""Exception hierarchy shared by every module.

All errors derive from :class:`DepthReidError` (a ``ValueError``), so callers
can catch one type. The CLI maps :class:`NumericalError` subclasses to exit
code 3 and everything else to exit code 2.
"""


class DepthReidError(ValueError):
    pass


class NumericalError(DepthReidError):
    pass


class InvalidIntrinsicsError(DepthReidError):
    pass


class InsufficientPointsError(DepthReidError):
    pass


class DegenerateNeighborhoodError(NumericalError):
    pass


class EmptySegmentError(DepthReidError):
    pass


class DegenerateExtentError(DepthReidError):
    pass


class WrongGridKindError(DepthReidError):
    pass


class MissingNormalsError(DepthReidError):
    pass


class InvalidMatrixError(NumericalError):
    pass


class NotPositiveDefiniteError(NumericalError):
    pass


class LayoutMismatchError(DepthReidError):
    pass


class MissingJointError(DepthReidError):
    pass


class DegenerateSkeletonError(DepthReidError):
    pass


class ZeroVarianceError(NumericalError):
    pass


class ConditioningError(NumericalError):
    pass


class DimensionMismatchError(DepthReidError):
    pass


class DataFileError(DepthReidError):
    """A file is missing, unreadable or malformed."""


class EmptyComparisonWarning(UserWarning):
    """Raised (as a warning) when a descriptor distance compared no voxel pairs."""


class ProtocolWarning(UserWarning):
    """Sampling or labelling irregularities met while running an evaluation protocol."""
