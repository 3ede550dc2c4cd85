"""On-disk session store: one directory per session holding the case, the
session state, and the append-only iteration trace.

Layout:
    <root>/<session_id>/case.json      voxelized case (ring included)
    <root>/<session_id>/session.json   status, iterations, selections, decisions
    <root>/<session_id>/trace.jsonl    one canonical-JSON row per policy call

Trace rows are the audit log; session.json is derived state that lets a
session be reloaded and refined later without the original process.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .agent import IterationRecord, PlanningSession, RoundOutcome, SessionStatus
from .cases import Case, load_case, save_case
from .errors import DecisionConflictError, SessionNotFoundError, TraceReadError
from .metrics import Goal, GoalCheck, GoalReport, GoalSet, MetricsReport
from .optimize import ObjectiveSet, objective_from_obj, objective_to_dict

SESSION_FORMAT = "srsplan-session/1"


def canonical_json(obj) -> str:
    """Stable serialization used for trace rows: sorted keys, fixed separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class ReviewDecision:
    session_id: str
    verdict: str  # "Accept" | "Refine"
    round: int
    reviewer_id: str
    timestamp: str
    refinement_text: str | None = None

    def __post_init__(self):
        if self.verdict not in ("Accept", "Refine"):
            raise ValueError(f"verdict must be Accept or Refine, got {self.verdict!r}")
        if self.verdict == "Refine" and not self.refinement_text:
            raise ValueError("Refine decisions require non-empty refinement text")


def _goal_check_to_dict(check: GoalCheck) -> dict:
    return {
        "metric": check.goal.metric,
        "comparator": check.goal.comparator,
        "threshold": check.goal.threshold,
        "units": check.goal.units,
        "value": check.value,
        "passed": check.passed,
    }


def _goal_report_from_rows(rows: list[dict]) -> GoalReport:
    checks = tuple(
        GoalCheck(
            goal=Goal(r["metric"], r["comparator"], r["threshold"], r["units"]),
            value=r["value"],
            passed=r["passed"],
        )
        for r in rows
    )
    return GoalReport(checks=checks, overall_pass=all(c.passed for c in checks))


def _iteration_to_dict(rec: IterationRecord) -> dict:
    return {
        "round": rec.round,
        "index": rec.index,
        "prompt_sha256": rec.prompt_sha256,
        "rationale": rec.rationale,
        "objectives": None if rec.objectives is None else [objective_to_dict(o) for o in rec.objectives],
        "format_error": rec.format_error,
        "format_error_message": rec.format_error_message,
        "weights": None if rec.weights is None else [float(w) for w in rec.weights],
        "metrics": None if rec.metrics is None else rec.metrics.to_flat_dict(),
        "goal_check": None if rec.goal_report is None else [_goal_check_to_dict(c) for c in rec.goal_report.checks],
        "duration_ms": rec.duration_ms,
    }


def _iteration_from_dict(doc: dict) -> IterationRecord:
    objectives = None
    if doc["objectives"] is not None:
        objectives = ObjectiveSet(tuple(objective_from_obj(o) for o in doc["objectives"]))
    return IterationRecord(
        round=doc["round"],
        index=doc["index"],
        prompt="",  # full prompts live only in memory and as trace hashes
        prompt_sha256=doc["prompt_sha256"],
        raw_output="",
        rationale=doc["rationale"],
        objectives=objectives,
        format_error=doc["format_error"],
        format_error_message=doc["format_error_message"],
        weights=None if doc["weights"] is None else np.asarray(doc["weights"], dtype=float),
        metrics=None if doc["metrics"] is None else MetricsReport.from_flat_dict(doc["metrics"]),
        goal_report=None if doc["goal_check"] is None else _goal_report_from_rows(doc["goal_check"]),
        duration_ms=doc["duration_ms"],
    )


class SessionStore:
    def __init__(self, root: str | Path, now_fn: Callable[[], str] | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.now_fn = now_fn or (lambda: time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))

    # -- paths ---------------------------------------------------------------

    def path(self, session_id: str) -> Path:
        return self.root / session_id

    def _session_file(self, session_id: str) -> Path:
        return self.path(session_id) / "session.json"

    def _require(self, session_id: str) -> Path:
        f = self._session_file(session_id)
        if not f.exists():
            raise SessionNotFoundError(session_id)
        return f

    def exists(self, session_id: str) -> bool:
        return self._session_file(session_id).exists()

    # -- traces ----------------------------------------------------------------

    def trace_sink(self, session_id: str) -> Callable[[dict], None]:
        """Appending writer for agent trace rows."""
        directory = self.path(session_id)
        directory.mkdir(parents=True, exist_ok=True)
        trace_path = directory / "trace.jsonl"

        def append(row: dict) -> None:
            with trace_path.open("a") as fh:
                fh.write(canonical_json(row) + "\n")

        return append

    def read_trace(self, session_id: str) -> list[dict]:
        trace_path = self.path(session_id) / "trace.jsonl"
        if not trace_path.exists():
            return []
        rows = []
        try:
            with trace_path.open() as fh:
                for line_no, line in enumerate(fh, 1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        rows.append(json.loads(line))
                    except json.JSONDecodeError as exc:
                        raise TraceReadError(f"{trace_path}:{line_no}: {exc}") from exc
        except OSError as exc:
            raise TraceReadError(f"cannot read {trace_path}: {exc}") from exc
        return rows

    # -- persistence -------------------------------------------------------------

    def save(self, session: PlanningSession, case: Case) -> Path:
        directory = self.path(session.id)
        directory.mkdir(parents=True, exist_ok=True)
        case_path = directory / "case.json"
        if not case_path.exists():
            save_case(case, case_path)

        existing = {}
        session_file = directory / "session.json"
        if session_file.exists():
            existing = json.loads(session_file.read_text())

        doc = {
            "format": SESSION_FORMAT,
            "id": session.id,
            "case_id": session.case_id,
            "policy": session.policy_name,
            "status": session.status.value,
            "round": session.round,
            "round_outcomes": {str(k): v.value for k, v in session.round_outcomes.items()},
            "selected": {str(k): v for k, v in session.selected.items()},
            "goals": [
                {"metric": g.metric, "comparator": g.comparator, "threshold": g.threshold, "units": g.units}
                for g in session.goals
            ],
            "refinement_text": session.refinement_text,
            "created_at": existing.get("created_at", self.now_fn()),
            "decisions": existing.get("decisions", []),
            "iterations": [_iteration_to_dict(r) for r in session.iterations],
        }
        session_file.write_text(json.dumps(doc, indent=1, sort_keys=True))
        return directory

    def load_document(self, session_id: str) -> dict:
        return json.loads(self._require(session_id).read_text())

    def load_session(self, session_id: str) -> PlanningSession:
        doc = self.load_document(session_id)
        goals = GoalSet(tuple(Goal(g["metric"], g["comparator"], g["threshold"], g["units"]) for g in doc["goals"]))
        session = PlanningSession(
            id=doc["id"],
            case_id=doc["case_id"],
            goals=goals,
            policy_name=doc["policy"],
            round=doc["round"],
            status=SessionStatus(doc["status"]),
            iterations=[_iteration_from_dict(r) for r in doc["iterations"]],
            round_outcomes={int(k): RoundOutcome(v) for k, v in doc["round_outcomes"].items()},
            selected={int(k): v for k, v in doc["selected"].items()},
            refinement_text=doc["refinement_text"],
        )
        return session

    def load_case(self, session_id: str) -> Case:
        self._require(session_id)
        return load_case(self.path(session_id) / "case.json")

    def list_ids(self) -> list[str]:
        """Session ids, newest first (by recorded creation time, then id)."""
        entries = []
        for child in self.root.iterdir():
            if (child / "session.json").exists():
                doc = json.loads((child / "session.json").read_text())
                entries.append((doc.get("created_at", ""), child.name))
        entries.sort(key=lambda e: (e[0], e[1]), reverse=True)
        return [name for _, name in entries]

    # -- decisions ----------------------------------------------------------------

    def decisions(self, session_id: str) -> list[dict]:
        return self.load_document(session_id).get("decisions", [])

    def record_decision(self, decision: ReviewDecision) -> None:
        """Append a decision; at most one per round (first write wins)."""
        session_file = self._require(decision.session_id)
        doc = json.loads(session_file.read_text())
        for existing in doc.get("decisions", []):
            if existing["round"] == decision.round:
                raise DecisionConflictError(
                    f"session {decision.session_id} round {decision.round} already has a decision"
                )
        doc.setdefault("decisions", []).append(
            {
                "verdict": decision.verdict,
                "round": decision.round,
                "reviewer_id": decision.reviewer_id,
                "timestamp": decision.timestamp,
                "refinement_text": decision.refinement_text,
            }
        )
        session_file.write_text(json.dumps(doc, indent=1, sort_keys=True))

    def set_status(self, session_id: str, status: SessionStatus) -> None:
        session_file = self._require(session_id)
        doc = json.loads(session_file.read_text())
        doc["status"] = status.value
        session_file.write_text(json.dumps(doc, indent=1, sort_keys=True))
