"""Exception types shared across the package.

Soft rejections (a point that fails association checks, an association that
loses too many members) are reported as ``None`` return values, not
exceptions; the classes below mark contract violations and hard failures.
"""


class PlioError(Exception):
    """Base class for all package errors."""


class InsufficientData(PlioError):
    """Not enough input samples to perform the requested operation."""


class ExcessMotion(PlioError):
    """Static initialization called on data that is not stationary."""


class NonMonotonicTime(PlioError):
    """Timestamps do not strictly increase."""


class OutOfRange(PlioError):
    """Query time outside the span of a trajectory."""


class TrajectoryGap(PlioError):
    """Trajectory does not cover the time span required for de-skew."""


class DegenerateGeometry(PlioError):
    """Point set does not determine a plane."""


class NonPositiveInput(PlioError):
    """A strictly positive scalar parameter was zero or negative."""


class EmptyMap(PlioError):
    """No points survived map accumulation."""


class MapTooSmall(PlioError):
    """Target map has fewer points than the neighbor count."""


class SingularInformation(PlioError):
    """Block to eliminate is rank deficient beyond regularization."""


class SolverDiverged(PlioError):
    """Levenberg-Marquardt damping grew past its limit without progress."""


class InitializationFailure(PlioError):
    """The estimator could not initialize from the dataset."""


class DatasetError(PlioError):
    """Dataset files are missing or unparseable."""


class NoOverlap(PlioError):
    """Estimate and ground-truth trajectories share no time span."""


class TooFewPairs(PlioError):
    """Fewer than three matched pose pairs for evaluation."""


class IoFailure(PlioError):
    """File could not be written or read."""


class UnknownPreset(PlioError):
    """Unrecognized world or trajectory preset name."""
