"""Session persistence: documents, traces, decisions, and listings."""

import json

import numpy as np
import pytest

from conftest import GOOD_OBJECTIVES, CannedPolicy, make_case, objective_block
from srsplan.agent import SessionRunner, SessionStatus
from srsplan.errors import DecisionConflictError, SessionNotFoundError, TraceReadError
from srsplan.metrics import default_goals
from srsplan.store import SESSION_FORMAT, ReviewDecision, SessionStore, canonical_json


def run_small_session(store, case_id="t-store", seed=11):
    case = make_case(case_id, seed=seed)
    policy = CannedPolicy([objective_block(GOOD_OBJECTIVES, "One decisive move.")])
    runner = SessionRunner(
        case, policy, default_goals(), trace_sink=store.trace_sink(case_id)
    )
    runner.run()
    store.save(runner.session, runner.case)
    return runner


class TestRoundTrip:
    def test_save_then_load_preserves_the_session(self, store):
        runner = run_small_session(store)
        session = runner.session
        loaded = store.load_session(session.id)

        assert loaded.id == session.id
        assert loaded.case_id == session.case_id
        assert loaded.policy_name == session.policy_name
        assert loaded.status == session.status
        assert loaded.round == session.round
        assert loaded.round_outcomes == session.round_outcomes
        assert loaded.selected == session.selected
        assert loaded.goals == session.goals
        assert loaded.refinement_text == session.refinement_text
        assert len(loaded.iterations) == len(session.iterations)
        for got, want in zip(loaded.iterations, session.iterations):
            assert got.round == want.round and got.index == want.index
            assert got.prompt_sha256 == want.prompt_sha256
            assert got.rationale == want.rationale
            assert got.format_error == want.format_error
            assert got.duration_ms == want.duration_ms
            assert np.allclose(got.weights, want.weights)
            assert got.metrics.to_flat_dict() == want.metrics.to_flat_dict()
            assert got.goal_report.overall_pass == want.goal_report.overall_pass
            assert [o for o in got.objectives] == [o for o in want.objectives]

    def test_document_shape(self, store):
        runner = run_small_session(store)
        doc = store.load_document(runner.session.id)
        assert doc["format"] == SESSION_FORMAT
        assert set(doc) == {
            "format", "id", "case_id", "policy", "status", "round",
            "round_outcomes", "selected", "goals", "refinement_text",
            "created_at", "decisions", "iterations",
        }
        it = doc["iterations"][0]
        assert set(it) == {
            "round", "index", "prompt_sha256", "rationale", "objectives",
            "format_error", "format_error_message", "weights", "metrics",
            "goal_check", "duration_ms",
        }

    def test_loaded_session_can_be_refined(self, store):
        runner = run_small_session(store)
        session = store.load_session(runner.session.id)
        case = store.load_case(runner.session.id)
        resumed = SessionRunner.resume(
            session, case, CannedPolicy([objective_block(GOOD_OBJECTIVES, "Again.")])
        )
        refined = resumed.refine()
        assert refined.round == 2
        store.save(refined, resumed.case)
        assert store.load_session(session.id).round == 2

    def test_created_at_survives_rewrites(self, tmp_path):
        stamps = iter(["2026-01-01T00:00:00Z", "2026-02-02T00:00:00Z"])
        store = SessionStore(tmp_path, now_fn=lambda: next(stamps))
        runner = run_small_session(store)
        store.save(runner.session, runner.case)  # second write
        assert store.load_document(runner.session.id)["created_at"] == "2026-01-01T00:00:00Z"

    def test_case_roundtrip_through_store(self, store):
        runner = run_small_session(store)
        case = store.load_case(runner.session.id)
        # The persisted case is the session's working copy, ring included.
        assert "Ring" in case.structure_names()
        assert case.prescription_gy == runner.case.prescription_gy

    def test_missing_session_raises(self, store):
        with pytest.raises(SessionNotFoundError):
            store.load_session("never-saved")
        with pytest.raises(SessionNotFoundError):
            store.load_case("never-saved")
        assert not store.exists("never-saved")


class TestTraces:
    def test_trace_rows_roundtrip(self, store):
        runner = run_small_session(store)
        rows = store.read_trace(runner.session.id)
        assert len(rows) == len(runner.session.iterations)
        assert rows[0]["session_id"] == runner.session.id
        assert rows[0]["round"] == 1 and rows[0]["index"] == 1
        assert rows[0]["format_error"] is False

    def test_trace_file_is_canonical_json(self, store):
        runner = run_small_session(store)
        path = store.path(runner.session.id) / "trace.jsonl"
        for line in path.read_text().splitlines():
            assert line == canonical_json(json.loads(line))

    def test_missing_trace_is_empty(self, store):
        run_small_session(store)
        assert store.read_trace("no-such-session") == []

    def test_corrupt_trace_reports_file_and_line(self, store):
        runner = run_small_session(store)
        path = store.path(runner.session.id) / "trace.jsonl"
        with path.open("a") as fh:
            fh.write("{not json\n")
        with pytest.raises(TraceReadError) as err:
            store.read_trace(runner.session.id)
        message = str(err.value)
        assert "trace.jsonl" in message
        line_count = len(path.read_text().splitlines())
        assert f":{line_count}:" in message

    def test_blank_lines_skipped(self, store):
        runner = run_small_session(store)
        path = store.path(runner.session.id) / "trace.jsonl"
        original = len(store.read_trace(runner.session.id))
        with path.open("a") as fh:
            fh.write("\n\n")
        assert len(store.read_trace(runner.session.id)) == original


class TestListing:
    def test_list_ids_newest_first(self, tmp_path):
        stamps = iter(
            [
                "2026-01-01T00:00:00Z",
                "2026-01-03T00:00:00Z",
                "2026-01-02T00:00:00Z",
            ]
        )
        store = SessionStore(tmp_path, now_fn=lambda: next(stamps))
        for name in ("s-old", "s-new", "s-mid"):
            run_small_session(store, case_id=name)
        assert store.list_ids() == ["s-new", "s-mid", "s-old"]

    def test_listing_ignores_stray_directories(self, store):
        runner = run_small_session(store)
        (store.root / "not-a-session").mkdir()
        assert store.list_ids() == [runner.session.id]

    def test_empty_store(self, store):
        assert store.list_ids() == []


class TestDecisions:
    def decision(self, session_id, verdict="Accept", round_number=1, text=None):
        return ReviewDecision(
            session_id=session_id,
            verdict=verdict,
            round=round_number,
            reviewer_id="rev-1",
            timestamp="2026-03-01T10:00:00Z",
            refinement_text=text,
        )

    def test_record_and_read_back(self, store):
        runner = run_small_session(store)
        store.record_decision(self.decision(runner.session.id))
        rows = store.decisions(runner.session.id)
        assert rows == [
            {
                "verdict": "Accept",
                "round": 1,
                "reviewer_id": "rev-1",
                "timestamp": "2026-03-01T10:00:00Z",
                "refinement_text": None,
            }
        ]

    def test_first_write_wins_per_round(self, store):
        runner = run_small_session(store)
        store.record_decision(self.decision(runner.session.id))
        with pytest.raises(DecisionConflictError):
            store.record_decision(
                self.decision(runner.session.id, verdict="Refine", text="Tighter, please.")
            )
        assert [d["verdict"] for d in store.decisions(runner.session.id)] == ["Accept"]

    def test_distinct_rounds_both_recorded(self, store):
        runner = run_small_session(store)
        store.record_decision(self.decision(runner.session.id, verdict="Refine", text="Ring it."))
        store.record_decision(self.decision(runner.session.id, round_number=2))
        assert [d["round"] for d in store.decisions(runner.session.id)] == [1, 2]

    def test_verdict_validation(self):
        with pytest.raises(ValueError):
            ReviewDecision("s", "Reject", 1, "rev", "2026-01-01T00:00:00Z")
        with pytest.raises(ValueError):
            ReviewDecision("s", "Refine", 1, "rev", "2026-01-01T00:00:00Z", refinement_text=None)

    def test_decision_for_missing_session(self, store):
        with pytest.raises(SessionNotFoundError):
            store.record_decision(self.decision("ghost"))

    def test_decisions_survive_session_rewrite(self, store):
        runner = run_small_session(store)
        store.record_decision(self.decision(runner.session.id))
        store.save(runner.session, runner.case)
        assert len(store.decisions(runner.session.id)) == 1


class TestStatus:
    def test_set_status_persists(self, store):
        runner = run_small_session(store)
        store.set_status(runner.session.id, SessionStatus.ACCEPTED)
        assert store.load_session(runner.session.id).status == SessionStatus.ACCEPTED

    def test_set_status_missing_session(self, store):
        with pytest.raises(SessionNotFoundError):
            store.set_status("ghost", SessionStatus.FAILED)
