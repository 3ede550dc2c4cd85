"""The iterative planning loop: prompt, policy call, parse, optimize,
evaluate, stop when goals hold, select the best plan, and run the
human-triggered conformity refinement round.

A session runs at most ten iterations per round and stops early the moment
every clinical goal passes. Malformed policy output is a counted value, not
an abort: the call is retried once, and if the retry also fails the iteration
is recorded as a format error while the plan state carries over unchanged.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .cases import Case
from .dose import DoseInfluence, compose_dose, compute_influence
from .errors import (
    InvalidObjectivesError,
    NoValidPlanError,
    PolicyTransportError,
    ProtocolError,
)
from .metrics import (
    GoalReport,
    GoalSet,
    MetricsReport,
    check_goals,
    compute_metrics,
    goal_deficiency,
)
from .optimize import (
    ObjectiveSet,
    RingSpec,
    create_ring,
    objectives_from_obj,
    objective_to_dict,
    optimize_weights,
)
from .policies import PolicyAdapter
from .prompts import STANDARD_REFINEMENT_TEXT, build_prompt

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 10
MEMORY_DIGEST_K = 5
TRANSPORT_ATTEMPTS = 3
DEFAULT_RING = RingSpec(inner_margin_mm=0.0, outer_margin_mm=3.0)

_JSON_BLOCK_RE = re.compile(r"```json\s*\n(.*?)```", re.DOTALL)


class SessionStatus(str, Enum):
    RUNNING = "Running"
    AWAITING_REVIEW = "AwaitingReview"
    ACCEPTED = "Accepted"
    REFINED = "Refined"
    FAILED = "Failed"


class RoundOutcome(str, Enum):
    GOALS_MET = "GoalsMet"
    ITERATION_CAP = "IterationCapReached"


class StepClock:
    """Deterministic stand-in for a wall clock: every reading advances by a
    fixed step, so logged durations are reproducible byte for byte."""

    def __init__(self, step_s: float = 0.001):
        self.step_s = step_s
        self.now = 0.0

    def __call__(self) -> float:
        self.now += self.step_s
        return self.now


@dataclass
class FormatError:
    """Structured-output parse failure, carried as a value and counted."""

    message: str
    rationale: str = ""


@dataclass
class IterationRecord:
    round: int
    index: int  # 1-based within the round
    prompt: str
    prompt_sha256: str
    raw_output: str
    rationale: str
    objectives: ObjectiveSet | None
    format_error: bool
    format_error_message: str | None
    weights: np.ndarray | None
    metrics: MetricsReport | None
    goal_report: GoalReport | None
    duration_ms: int


@dataclass
class PlanningSession:
    id: str
    case_id: str
    goals: GoalSet
    policy_name: str
    round: int = 1
    status: SessionStatus = SessionStatus.RUNNING
    iterations: list[IterationRecord] = field(default_factory=list)
    round_outcomes: dict[int, RoundOutcome] = field(default_factory=dict)
    selected: dict[int, int] = field(default_factory=dict)  # round -> iteration index in round
    refinement_text: str | None = None

    def round_iterations(self, round_number: int) -> list[IterationRecord]:
        return [r for r in self.iterations if r.round == round_number]

    def selected_record(self, round_number: int | None = None) -> IterationRecord:
        rn = self.round if round_number is None else round_number
        if rn not in self.selected:
            raise NoValidPlanError(f"session {self.id} has no selected plan for round {rn}")
        index = self.selected[rn]
        for rec in self.round_iterations(rn):
            if rec.index == index:
                return rec
        raise NoValidPlanError(f"session {self.id} selection points at a missing iteration")


def parse_policy_output(text: str, case: Case | None = None) -> tuple[ObjectiveSet, str] | FormatError:
    """Split raw policy output into (objectives, rationale).

    The last fenced ```json block is the structured answer; everything else is
    rationale. Schema violations, including structure names absent from the
    case and sets that cannot drive the optimizer (no PTV lower objective),
    come back as FormatError values."""
    blocks = _JSON_BLOCK_RE.findall(text)
    rationale = _JSON_BLOCK_RE.sub(" ", text).strip()
    if not blocks:
        return FormatError(message="no fenced json block found", rationale=rationale)
    try:
        payload = json.loads(blocks[-1])
    except json.JSONDecodeError as exc:
        return FormatError(message=f"objective block is not valid JSON: {exc}", rationale=rationale)
    try:
        objectives = objectives_from_obj(payload)
        if case is not None:
            objectives.validate_against(case)
            objectives.require_ptv_lower(case)
    except InvalidObjectivesError as exc:
        return FormatError(message=str(exc), rationale=rationale)
    return objectives, rationale


def select_best(session: PlanningSession, round_number: int | None = None) -> int:
    """Pick the round's best iteration: most goals passed, then smallest
    normalized deficiency, then highest CI, ties resolved to the earliest.
    Returns the iteration's 1-based index within the round."""
    rn = session.round if round_number is None else round_number
    candidates = [r for r in session.round_iterations(rn) if r.metrics is not None]
    if not candidates:
        raise NoValidPlanError(f"session {session.id} round {rn} has no iteration with metrics")
    best = None
    best_key = None
    for rec in candidates:
        key = (
            rec.goal_report.passed_count(),
            -goal_deficiency(rec.metrics, session.goals),
            rec.metrics.ci,
            -rec.index,
        )
        if best_key is None or key > best_key:
            best, best_key = rec, key
    return best.index


def _trace_row(
    session: PlanningSession,
    record_round: int,
    index: int,
    prompt_sha: str,
    raw_output: str,
    rationale: str,
    objectives: ObjectiveSet | None,
    metrics: MetricsReport | None,
    format_error: bool,
    duration_ms: int,
) -> dict:
    return {
        "session_id": session.id,
        "round": record_round,
        "index": index,
        "prompt_sha256": prompt_sha,
        "raw_output": raw_output,
        "rationale": rationale,
        "objectives": None if objectives is None else [objective_to_dict(o) for o in objectives],
        "metrics": None if metrics is None else metrics.to_flat_dict(),
        "format_error": format_error,
        "duration_ms": duration_ms,
    }


class SessionRunner:
    """Owns the per-session loop state shared by round 1 and round 2."""

    def __init__(
        self,
        case: Case,
        policy: PolicyAdapter,
        goals: GoalSet,
        session_id: str | None = None,
        max_iter: int = MAX_ITERATIONS,
        optimizer_steps: int = 150,
        timer: Callable[[], float] | None = None,
        sleeper: Callable[[float], None] = time.sleep,
        trace_sink: Callable[[dict], None] | None = None,
        ring: RingSpec = DEFAULT_RING,
    ):
        if max_iter < 1:
            raise ProtocolError(f"max_iter must be >= 1, got {max_iter}")
        self.case = case.with_structure(create_ring(case, ring))
        self.policy = policy
        self.goals = goals
        self.max_iter = max_iter
        self.optimizer_steps = optimizer_steps
        # The scripted policies are pure functions of the prompt, so a step
        # clock keeps their logs byte-identical across reruns; remote runs
        # default to the real clock.
        if timer is None:
            timer = StepClock() if policy.name.startswith("scripted") else time.perf_counter
        self.timer = timer
        self.sleeper = sleeper
        self.trace_sink = trace_sink or (lambda row: None)
        self.session = PlanningSession(
            id=session_id or case.id,
            case_id=case.id,
            goals=goals,
            policy_name=policy.name,
        )
        self.influence: DoseInfluence = compute_influence(self.case)
        self.memory: list[tuple[list[dict], dict]] = []
        self.weights: np.ndarray | None = None
        self.latest_metrics: MetricsReport | None = None
        self.latest_check: GoalReport | None = None

    # -- policy invocation with transport retry -----------------------------

    def _call_policy(self, prompt: str) -> str | None:
        """Returns raw output, or None after repeated transport failures
        (the session is then marked Failed)."""
        for attempt in range(TRANSPORT_ATTEMPTS):
            try:
                return self.policy.propose(prompt)
            except PolicyTransportError as exc:
                logger.warning("policy transport failure (attempt %d/%d): %s", attempt + 1, TRANSPORT_ATTEMPTS, exc)
                if attempt + 1 < TRANSPORT_ATTEMPTS:
                    self.sleeper(2.0**attempt)
        self.session.status = SessionStatus.FAILED
        return None

    # -- one round -----------------------------------------------------------

    def _run_round(self, round_number: int, refinement_text: str | None) -> None:
        session = self.session
        session.round = round_number
        outcome = RoundOutcome.ITERATION_CAP
        for index in range(1, self.max_iter + 1):
            prompt = build_prompt(
                self.case,
                self.goals,
                self.memory,
                round_number,
                latest_metrics=self.latest_metrics,
                latest_check=self.latest_check,
                refinement_text=refinement_text,
                memory_k=MEMORY_DIGEST_K,
                iteration_number=index,
            )
            prompt_sha = hashlib.sha256(prompt.encode()).hexdigest()

            parsed: tuple[ObjectiveSet, str] | FormatError | None = None
            raw = ""
            duration_ms = 0
            for attempt in range(2):
                t0 = self.timer()
                maybe_raw = self._call_policy(prompt)
                if maybe_raw is None:
                    return  # transport gave out; session already Failed
                raw = maybe_raw
                parsed = parse_policy_output(raw, self.case)
                if isinstance(parsed, FormatError):
                    duration_ms = int(round((self.timer() - t0) * 1000.0))
                    self.trace_sink(
                        _trace_row(
                            session, round_number, index, prompt_sha, raw,
                            parsed.rationale, None, None, True, duration_ms,
                        )
                    )
                    logger.info("session %s r%d i%d: format error (%s)", session.id, round_number, index, parsed.message)
                    continue
                # success: finish the iteration inside this attempt's timing
                objectives, rationale = parsed
                self.weights = optimize_weights(
                    self.influence,
                    self.case,
                    objectives,
                    max_steps=self.optimizer_steps,
                    initial_weights=self.weights,
                )
                dose = compose_dose(self.influence, self.weights)
                metrics = compute_metrics(dose, self.case)
                goal_report = check_goals(metrics, self.goals)
                duration_ms = int(round((self.timer() - t0) * 1000.0))
                self.trace_sink(
                    _trace_row(
                        session, round_number, index, prompt_sha, raw,
                        rationale, objectives, metrics, False, duration_ms,
                    )
                )
                break

            if isinstance(parsed, FormatError):
                # Both attempts malformed: record the iteration, keep the
                # previous objectives/plan state for the next one.
                session.iterations.append(
                    IterationRecord(
                        round=round_number, index=index, prompt=prompt, prompt_sha256=prompt_sha,
                        raw_output=raw, rationale=parsed.rationale, objectives=None,
                        format_error=True, format_error_message=parsed.message,
                        weights=None, metrics=None, goal_report=None, duration_ms=duration_ms,
                    )
                )
                continue

            objectives, rationale = parsed
            obj_dicts = [objective_to_dict(o) for o in objectives]
            self.latest_metrics = metrics
            self.latest_check = goal_report
            self.memory.append((obj_dicts, metrics.to_flat_dict()))
            session.iterations.append(
                IterationRecord(
                    round=round_number, index=index, prompt=prompt, prompt_sha256=prompt_sha,
                    raw_output=raw, rationale=rationale, objectives=objectives,
                    format_error=False, format_error_message=None,
                    weights=self.weights.copy(), metrics=metrics, goal_report=goal_report,
                    duration_ms=duration_ms,
                )
            )
            if goal_report.overall_pass:
                outcome = RoundOutcome.GOALS_MET
                break

        session.round_outcomes[round_number] = outcome
        session.selected[round_number] = select_best(session, round_number)
        session.status = SessionStatus.AWAITING_REVIEW

    # -- public API ------------------------------------------------------------

    @classmethod
    def resume(cls, session: PlanningSession, case: Case, policy: PolicyAdapter, **kwargs) -> "SessionRunner":
        """Rebuild a runner around a previously persisted session so it can be
        refined. Memory is replayed from the successful iterations; the plan
        state restarts from the last round's selected iteration."""
        runner = cls(case, policy, session.goals, session_id=session.id, **kwargs)
        runner.session = session
        for rec in session.iterations:
            if rec.metrics is not None and rec.objectives is not None:
                runner.memory.append(
                    ([objective_to_dict(o) for o in rec.objectives], rec.metrics.to_flat_dict())
                )
        if session.selected:
            best = session.selected_record(max(session.selected))
            runner.weights = None if best.weights is None else best.weights.copy()
            runner.latest_metrics = best.metrics
            runner.latest_check = best.goal_report
        return runner

    def run(self) -> PlanningSession:
        self._run_round(1, None)
        return self.session

    def refine(self, refinement_text: str = STANDARD_REFINEMENT_TEXT) -> PlanningSession:
        session = self.session
        if session.status != SessionStatus.AWAITING_REVIEW:
            raise ProtocolError(
                f"session {session.id} is not awaiting review "
                f"(status {session.status.value}, round {session.round})"
            )
        if not refinement_text:
            raise ProtocolError("refinement requires non-empty text")
        if refinement_text != STANDARD_REFINEMENT_TEXT:
            logger.warning(
                "session %s: refinement text differs from the standard prompt; applying it anyway",
                session.id,
            )
        session.status = SessionStatus.REFINED
        session.refinement_text = refinement_text
        # Seed the new round from the previous round's best plan.
        best = session.selected_record(session.round)
        self.weights = best.weights.copy()
        self.latest_metrics = best.metrics
        self.latest_check = best.goal_report
        self._run_round(session.round + 1, refinement_text)
        return session


def run_session(
    case: Case,
    policy: PolicyAdapter,
    goals: GoalSet,
    max_iter: int = MAX_ITERATIONS,
    **kwargs,
) -> PlanningSession:
    """One-shot round-1 planning session."""
    return SessionRunner(case, policy, goals, max_iter=max_iter, **kwargs).run()
