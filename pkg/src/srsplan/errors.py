"""Exception types shared across the planning toolkit."""


class PlanningError(Exception):
    """Base class for all srsplan errors."""


class InvalidSpecError(PlanningError, ValueError):
    """A case, ring, or cohort specification is malformed."""


class GeometryError(PlanningError, ValueError):
    """A structure or index does not fit the voxel grid."""


class InvalidCaseError(PlanningError, ValueError):
    """A case violates a structural requirement (e.g. no beams)."""


class InvalidWeightsError(PlanningError, ValueError):
    """Beam weights are negative, non-finite, or mis-sized."""


class InvalidObjectivesError(PlanningError, ValueError):
    """An objective set cannot be applied to the case."""


class EmptyStructureError(PlanningError, ValueError):
    """A metric was requested over an empty structure mask."""


class UndefinedMetricError(PlanningError, ValueError):
    """A metric is undefined for the given dose (e.g. zero isodose volume)."""


class InvalidGoalSetError(PlanningError, ValueError):
    """A goal references a metric that the report does not provide."""


class ProtocolError(PlanningError, RuntimeError):
    """A session operation was invoked in an illegal state."""


class NoValidPlanError(PlanningError, RuntimeError):
    """No iteration in the session produced a usable plan."""


class PolicyTransportError(PlanningError, RuntimeError):
    """The remote policy endpoint could not be reached or answered badly."""


class DegenerateSampleError(PlanningError, ValueError):
    """All paired differences are zero; the test carries no information."""


class TraceReadError(PlanningError, RuntimeError):
    """A trace log could not be read or decoded."""


class SessionNotFoundError(PlanningError, KeyError):
    """The requested session id does not exist in the store."""


class DecisionConflictError(PlanningError, RuntimeError):
    """A review decision was submitted for a session not awaiting review."""
