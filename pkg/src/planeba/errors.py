"""Exception types raised across the toolkit."""


class PlaneBaError(Exception):
    """Base class for all toolkit errors."""


class DegeneratePlane(PlaneBaError):
    """Homography undefined: viewing camera lies (numerically) on the plane."""


class EmptyWindow(PlaneBaError):
    """IMU preintegration window contains no samples."""


class EmptyPointSet(PlaneBaError):
    """An operation that needs at least one point received none."""


class MixedKeys(PlaneBaError):
    """Factors being merged do not share the same (frame, frame, plane) key."""


class PointBehindCamera(PlaneBaError):
    """Landmark has non-positive depth in the observing camera."""


class RankDeficient(PlaneBaError):
    """Vertical plane fit is rank deficient (plane through the origin included)."""


class RayParallelToPlane(PlaneBaError):
    """Ray-plane intersection undefined."""


class LinearSolveFailure(PlaneBaError):
    """Reduced normal equations stayed indefinite/singular after damping retries."""


class InvalidProblem(PlaneBaError):
    """Problem failed validation (dangling ids, inconsistent blocks)."""


class InvalidVariant(PlaneBaError):
    """Unknown bundle-adjustment variant name."""


class MissingState(PlaneBaError):
    """A factor references a state id that does not exist."""


class DisconnectedGraph(PlaneBaError):
    """Pose graph has nodes unreachable from the gauge node."""


class LengthMismatch(PlaneBaError):
    """Trajectories being compared have different lengths or ids."""


class InfeasibleTrajectory(PlaneBaError):
    """Waypoint trajectory violates velocity/acceleration bounds."""


class VersionMismatch(PlaneBaError):
    """Serialized artifact has an unsupported major format version."""


class CorruptRecord(PlaneBaError):
    """Serialized artifact has a malformed or missing record."""

    def __init__(self, message, path=None, line=None):
        detail = message
        if path is not None:
            detail += f" [{path}" + (f":{line}]" if line is not None else "]")
        super().__init__(detail)
        self.path = path
        self.line = line


class IoFailure(PlaneBaError):
    """Report writing failed."""
