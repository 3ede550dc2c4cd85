"""HTTP review service: exposes stored planning sessions for human review and
accepts one Accept/Refine verdict per round. A Refine verdict re-enters the
planning loop with the reviewer's feedback text (the standardized conformity
prompt by default) and leaves the session awaiting round-2 review.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import defaultdict
from typing import Callable

from fastapi import Body, FastAPI, Header, Response
from fastapi.responses import JSONResponse

from .agent import SessionRunner, SessionStatus
from .dose import DoseInfluence, compose_dose, compute_influence
from .errors import DecisionConflictError, SessionNotFoundError
from .metrics import compute_dvh
from .policies import PolicyAdapter, make_policy
from .prompts import STANDARD_REFINEMENT_TEXT
from .store import ReviewDecision, SessionStore

logger = logging.getLogger(__name__)

SERVICE_DVH_BIN_GY = 0.25
VERDICTS = ("Accept", "Refine")


def _canonical(payload, status_code: int = 200) -> Response:
    """Deterministic JSON bytes: repeated reads of the same state are
    byte-identical."""
    return Response(
        content=json.dumps(payload, sort_keys=True, separators=(",", ":")),
        status_code=status_code,
        media_type="application/json",
    )


def _error(status_code: int, message: str) -> Response:
    return _canonical({"detail": message}, status_code=status_code)


class ReviewService:
    """State shared across requests: the session store, per-session locks, a
    dose-influence cache for DVH recomputation, and in-flight refinements."""

    def __init__(
        self,
        store: SessionStore,
        policy_factory: Callable[[str], PolicyAdapter] | None = None,
        allow_multiple_refinements: bool = False,
        background_refinement: bool = True,
    ):
        self.store = store
        self.policy_factory = policy_factory or make_policy
        self.allow_multiple_refinements = allow_multiple_refinements
        self.background_refinement = background_refinement
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()
        self._influence_cache: dict[str, DoseInfluence] = {}
        self._threads: list[threading.Thread] = []

    def lock_for(self, session_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks[session_id]

    def influence_for(self, session_id: str) -> DoseInfluence:
        if session_id not in self._influence_cache:
            case = self.store.load_case(session_id)
            self._influence_cache[session_id] = compute_influence(case)
        return self._influence_cache[session_id]

    def wait_for_refinements(self, timeout: float | None = None) -> None:
        for t in self._threads:
            t.join(timeout)
        self._threads = [t for t in self._threads if t.is_alive()]

    # -- views ---------------------------------------------------------------

    def session_summary(self, session_id: str) -> dict:
        doc = self.store.load_document(session_id)
        selected = doc.get("selected", {})
        latest_round = max((int(r) for r in selected), default=None)
        metrics = None
        goals_passed = None
        goals_total = None
        if latest_round is not None:
            index = selected[str(latest_round)]
            for it in doc["iterations"]:
                if it["round"] == latest_round and it["index"] == index:
                    metrics = it.get("metrics")
                    rows = it.get("goal_check") or []
                    goals_total = len(rows)
                    goals_passed = sum(1 for r in rows if r.get("passed"))
                    break
        return {
            "id": doc["id"],
            "case_id": doc["case_id"],
            "status": doc["status"],
            "round": doc["round"],
            "created_at": doc["created_at"],
            "policy_name": doc["policy"],
            "selected_round": latest_round,
            "metrics": metrics,
            "goals_passed": goals_passed,
            "goals_total": goals_total,
        }

    def session_detail(self, session_id: str) -> dict:
        doc = self.store.load_document(session_id)
        case = self.store.load_case(session_id)

        # Merge prompt-and-output text back in from the trace log; the session
        # document stores only the structured outcome of each iteration.
        trace_by_key = {}
        for row in self.store.read_trace(session_id):
            trace_by_key[(row.get("round"), row.get("index"))] = row
        iterations = []
        for it in doc["iterations"]:
            merged = dict(it)
            row = trace_by_key.get((it["round"], it["index"]))
            if row is not None:
                merged["rationale"] = row.get("rationale", merged.get("rationale", ""))
                merged["raw_output"] = row.get("raw_output", "")
                merged["duration_ms"] = row.get("duration_ms", merged.get("duration_ms"))
            iterations.append(merged)

        # DVH recomputation for each round's selected plan, from stored beam
        # weights; read-only and deterministic.
        dvh: dict[str, dict] = {}
        selected = doc.get("selected", {})
        if selected:
            influence = self.influence_for(session_id)
            for round_str, index in selected.items():
                weights = None
                for it in doc["iterations"]:
                    if it["round"] == int(round_str) and it["index"] == index:
                        weights = it.get("weights")
                        break
                if weights is None:
                    continue
                dose = compose_dose(influence, weights)
                curves = {}
                for structure in sorted(case.structures, key=lambda s: s.name):
                    if not structure.mask.any():
                        continue
                    curves[structure.name] = compute_dvh(dose, structure, SERVICE_DVH_BIN_GY).to_dict()
                dvh[round_str] = curves

        structures = [
            {
                "name": s.name,
                "role": s.role.value,
                "volume_cc": round(float(s.mask.sum()) * case.grid.voxel_volume_cc, 6),
            }
            for s in sorted(case.structures, key=lambda s: s.name)
        ]
        return {
            **doc,
            "iterations": iterations,
            "structures": structures,
            "prescription_gy": case.prescription_gy,
            "dvh_bin_gy": SERVICE_DVH_BIN_GY,
            "dvh": dvh,
            "decisions": self.store.decisions(session_id),
            "standard_refinement_text": STANDARD_REFINEMENT_TEXT,
        }

    # -- decision ------------------------------------------------------------

    def _run_refinement(self, session_id: str, text: str) -> None:
        try:
            session = self.store.load_session(session_id)
            # The stored status is already Refined (observable while we work);
            # the runner itself wants the pre-decision state.
            session.status = SessionStatus.AWAITING_REVIEW
            case = self.store.load_case(session_id)
            runner = SessionRunner.resume(
                session, case, self._policy_for(session.policy_name),
                trace_sink=self.store.trace_sink(session_id),
            )
            runner.refine(text)
            self.store.save(runner.session, runner.case)
        except Exception:
            logger.exception("refinement for session %s failed", session_id)
            try:
                self.store.set_status(session_id, SessionStatus.FAILED)
            except Exception:
                logger.exception("could not mark session %s failed", session_id)

    def _policy_for(self, policy_name: str) -> PolicyAdapter:
        """Rebuild the policy the session was planned with; unknown names fall
        back to the default scripted policy."""
        try:
            return self.policy_factory(policy_name)
        except Exception:
            logger.warning("unknown policy %r; refining with the scripted default", policy_name)
            return self.policy_factory("scripted")

    def submit_decision(self, session_id: str, verdict: str, text: str | None, reviewer: str) -> Response:
        if verdict not in VERDICTS:
            return _error(400, f"verdict must be one of {list(VERDICTS)}, got {verdict!r}")
        if verdict == "Refine" and not (text and text.strip()):
            return _error(400, "Refine requires non-empty refinement text")

        with self.lock_for(session_id):
            try:
                doc = self.store.load_document(session_id)
            except SessionNotFoundError as exc:
                return _error(404, str(exc))
            if doc["status"] != SessionStatus.AWAITING_REVIEW.value:
                return _error(409, f"session {session_id} is not awaiting review (status {doc['status']})")
            if verdict == "Refine" and doc["round"] >= 2 and not self.allow_multiple_refinements:
                return _error(409, f"session {session_id} already used its refinement round")

            decision = ReviewDecision(
                session_id=session_id,
                verdict=verdict,
                round=doc["round"],
                reviewer_id=reviewer,
                timestamp=self.store.now_fn(),
                refinement_text=text if verdict == "Refine" else None,
            )
            try:
                self.store.record_decision(decision)
            except DecisionConflictError as exc:
                return _error(409, str(exc))

            if verdict == "Accept":
                self.store.set_status(session_id, SessionStatus.ACCEPTED)
                return _canonical(self.session_summary(session_id))

            # Refine: mark the stored session Refined so reviewers observe the
            # in-flight state, then run the next round.
            self.store.set_status(session_id, SessionStatus.REFINED)

        if self.background_refinement:
            thread = threading.Thread(
                target=self._run_refinement, args=(session_id, text), daemon=True
            )
            self._threads.append(thread)
            thread.start()
        else:
            self._run_refinement(session_id, text)
        return _canonical(self.session_summary(session_id))


def create_app(
    store: SessionStore,
    policy_factory: Callable[[str], PolicyAdapter] | None = None,
    allow_multiple_refinements: bool = False,
    background_refinement: bool = True,
    static_dir: str | None = None,
) -> FastAPI:
    service = ReviewService(
        store,
        policy_factory=policy_factory,
        allow_multiple_refinements=allow_multiple_refinements,
        background_refinement=background_refinement,
    )
    app = FastAPI(title="srsplan review service", version="1.0")
    app.state.service = service

    @app.get("/sessions")
    def list_sessions() -> Response:
        summaries = [service.session_summary(sid) for sid in store.list_ids()]
        return _canonical({"sessions": summaries})

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str) -> Response:
        try:
            return _canonical(service.session_detail(session_id))
        except SessionNotFoundError as exc:
            return _error(404, str(exc))

    @app.post("/sessions/{session_id}/decision")
    def post_decision(
        session_id: str,
        body: dict = Body(...),
        x_reviewer_id: str | None = Header(default=None),
    ) -> Response:
        if not isinstance(body, dict):
            return _error(400, "decision body must be a JSON object")
        verdict = body.get("verdict")
        text = body.get("text")
        if text is not None and not isinstance(text, str):
            return _error(400, "text must be a string")
        if not isinstance(verdict, str):
            return _error(400, "verdict must be a string")
        reviewer = body.get("reviewer") or x_reviewer_id or "anonymous"
        return service.submit_decision(session_id, verdict, text, str(reviewer))

    @app.exception_handler(Exception)
    def unhandled(request, exc):  # pragma: no cover - defensive
        logger.exception("unhandled service error")
        return JSONResponse(status_code=500, content={"detail": "internal error"})

    if static_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app
