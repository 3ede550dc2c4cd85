"""Desk-scale automated radiosurgery planning: synthetic cases, an analytic
dose engine, an inverse optimizer, an iterative planning loop with human
review, trace content analysis, and paired statistics."""

__version__ = "0.1.0"

from .agent import (
    MAX_ITERATIONS,
    PlanningSession,
    RoundOutcome,
    SessionRunner,
    SessionStatus,
    StepClock,
    run_session,
    select_best,
)
from .cases import (
    BeamSpec,
    Case,
    CaseSpec,
    CohortSpec,
    StructureMask,
    StructureRole,
    VoxelGrid,
    generate_synthetic_case,
    load_case,
    sample_case_spec,
    sample_cohort,
    save_case,
)
from .dose import (
    DoseDistribution,
    DoseInfluence,
    compose_dose,
    compute_influence,
    load_influence,
    save_influence,
)
from .errors import (
    DecisionConflictError,
    DegenerateSampleError,
    EmptyStructureError,
    GeometryError,
    InvalidCaseError,
    InvalidGoalSetError,
    InvalidObjectivesError,
    InvalidSpecError,
    InvalidWeightsError,
    NoValidPlanError,
    PolicyTransportError,
    ProtocolError,
    SessionNotFoundError,
    TraceReadError,
    UndefinedMetricError,
)
from .metrics import (
    DVHCurve,
    Goal,
    GoalReport,
    GoalSet,
    MetricsReport,
    PRIMARY_METRICS,
    SECONDARY_METRICS,
    check_goals,
    compute_dvh,
    compute_metrics,
    conformity_index,
    coverage,
    default_goals,
    dmax,
    gradient_index,
    v12_normal_brain,
)
from .optimize import (
    Objective,
    ObjectiveSet,
    RingSpec,
    create_ring,
    objective_cost,
    optimize_weights,
)
from .policies import PolicyAdapter, RemotePolicy, ScriptedPolicy, make_policy
from .prompts import STANDARD_REFINEMENT_TEXT, build_prompt
from .review import create_app
from .stats import (
    PairedSample,
    bh_adjust,
    endpoint_family_analysis,
    paired_summary,
    wilcoxon_signed_rank,
)
from .store import ReviewDecision, SessionStore
from .traces import (
    CognitiveCategory,
    MarkerLexicon,
    analyze_logs,
    analyze_session,
    classify_utterance,
    compare_variants,
    sample_for_review,
)
