"""Exception types shared across the package."""


class CertigradError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(CertigradError):
    """Operands do not conform in shape."""


class DegenerateInput(CertigradError):
    """Input carries no usable information (e.g. an all-zero matrix)."""


class IterationLimit(CertigradError):
    """Iterative solve hit its iteration cap before converging.

    Carries the last iterate so the caller can decide whether it is usable.
    """

    def __init__(self, message, x=None, residual=None, iterations=None):
        super().__init__(message)
        self.x = x
        self.residual = residual
        self.iterations = iterations


class DuplicateHomogenizing(CertigradError):
    """A user-supplied constraint duplicates the homogenizing constraint."""


class InconsistentConstraints(CertigradError):
    """Linearly dependent equality constraints with contradictory right-hand sides."""


class HomogeneousEntryZero(CertigradError):
    """Extracted solution has a (near-)zero homogeneous entry; problem is malformed."""


class DegenerateObjective(CertigradError):
    """Objective inner product vanishes; relative suboptimality gap undefined."""


class NotStationary(CertigradError):
    """Cached primal-dual point violates stationarity; backprop preconditions unmet."""


class LSQRDiverged(CertigradError):
    """LSQR made no progress on the backprop system."""


class MultiplierResidualTooLarge(CertigradError):
    """Recomputed multipliers do not make the solution stationary."""


class TightnessLost(CertigradError):
    """A perturbed or updated problem no longer has a rank-1 relaxation solution."""

    def __init__(self, message, detail=None):
        super().__init__(message)
        self.detail = detail


class InsufficientSamples(CertigradError):
    """Not enough feasible samples to pin down the constraint nullspace."""


class TooFewLandmarks(CertigradError):
    """Localization instance has fewer than three non-collinear landmarks."""


class DegenerateConfiguration(CertigradError):
    """Point configuration does not determine a unique rigid transform."""


class BehindCamera(CertigradError):
    """Landmark has non-positive depth in the camera frame."""


class ZeroDisparity(CertigradError):
    """Stereo disparity is zero or negative; point cannot be triangulated."""


class SolverFailure(CertigradError):
    """SDP solve ended in a non-optimal status where an optimal one was required."""
