"""Planning-loop semantics: stopping, retries, selection, and refinement."""

import hashlib
import json
import logging
import time

import numpy as np
import pytest

from conftest import (
    GOOD_OBJECTIVES,
    WEAK_OBJECTIVES,
    CannedPolicy,
    objective_block,
)
from srsplan.agent import (
    MAX_ITERATIONS,
    FormatError,
    IterationRecord,
    PlanningSession,
    RoundOutcome,
    SessionRunner,
    SessionStatus,
    StepClock,
    parse_policy_output,
    run_session,
    select_best,
)
from srsplan.errors import NoValidPlanError, PolicyTransportError, ProtocolError
from srsplan.metrics import MetricsReport, check_goals, default_goals
from srsplan.policies import ScriptedPolicy
from srsplan.prompts import STANDARD_REFINEMENT_TEXT

GOOD_BLOCK = objective_block(GOOD_OBJECTIVES, "Covering the target first.")
WEAK_BLOCK = objective_block(WEAK_OBJECTIVES, "A timid attempt.")
MALFORMED = 'Thinking aloud.\n```json\n[{"structure": "PTV",\n```'


def goals_for(case):
    return default_goals(prescription_gy=case.prescription_gy)


class TransportFlaky:
    """Raises transport errors for the first `failures` calls, then delegates."""

    name = "scripted-flaky-transport"
    temperature = 0.0
    top_k = 1

    def __init__(self, failures, block=GOOD_BLOCK):
        self.failures = failures
        self.block = block
        self.calls = 0

    def propose(self, prompt):
        self.calls += 1
        if self.calls <= self.failures:
            raise PolicyTransportError(f"synthetic outage {self.calls}")
        return self.block


class FirstCallMalformed:
    """Malformed output on the very first call only; clean afterwards."""

    name = "scripted-flaky-format"
    temperature = 0.0
    top_k = 1

    def __init__(self):
        self.calls = 0

    def propose(self, prompt):
        self.calls += 1
        return MALFORMED if self.calls == 1 else GOOD_BLOCK


class TestParsePolicyOutput:
    def test_good_block(self):
        parsed = parse_policy_output(GOOD_BLOCK)
        objectives, rationale = parsed
        assert rationale == "Covering the target first."
        assert len(objectives) == len(GOOD_OBJECTIVES)

    def test_missing_block(self):
        out = parse_policy_output("pure prose, no JSON anywhere")
        assert isinstance(out, FormatError)
        assert out.rationale == "pure prose, no JSON anywhere"

    def test_invalid_json(self):
        out = parse_policy_output(MALFORMED)
        assert isinstance(out, FormatError)
        assert "JSON" in out.message

    def test_last_block_wins(self):
        text = objective_block(WEAK_OBJECTIVES, "draft") + "\n" + objective_block(GOOD_OBJECTIVES, "")
        objectives, _ = parse_policy_output(text)
        doses = sorted(o.dose_gy for o in objectives)
        assert doses == sorted(o["dose_gy"] for o in GOOD_OBJECTIVES)

    def test_unknown_structure_against_case(self, small_case):
        payload = GOOD_OBJECTIVES + [
            {"structure": "Ghost", "kind": "upper", "dose_gy": 5.0, "volume_pct": 0.0, "priority": 10}
        ]
        out = parse_policy_output(objective_block(payload, "x"), small_case)
        assert isinstance(out, FormatError)
        assert "Ghost" in out.message

    def test_requires_ptv_lower_against_case(self, small_case):
        payload = [{"structure": "Brain", "kind": "upper", "dose_gy": 10.0, "volume_pct": 1.0, "priority": 40}]
        out = parse_policy_output(objective_block(payload, "x"), small_case)
        assert isinstance(out, FormatError)


class TestLoopStopping:
    def test_stops_after_single_passing_iteration(self, small_case):
        policy = CannedPolicy([GOOD_BLOCK])
        session = run_session(small_case, policy, goals_for(small_case))
        assert len(session.iterations) == 1
        assert session.round_outcomes[1] == RoundOutcome.GOALS_MET
        assert session.status == SessionStatus.AWAITING_REVIEW
        assert session.selected == {1: 1}
        assert policy.calls == 1

    def test_never_passing_policy_hits_the_cap(self, small_case):
        policy = CannedPolicy([WEAK_BLOCK])
        session = run_session(small_case, policy, goals_for(small_case), optimizer_steps=40)
        assert len(session.iterations) == MAX_ITERATIONS
        assert session.round_outcomes[1] == RoundOutcome.ITERATION_CAP
        assert session.status == SessionStatus.AWAITING_REVIEW
        assert 1 in session.selected

    def test_convergence_on_third_iteration(self, small_case):
        policy = CannedPolicy([WEAK_BLOCK, WEAK_BLOCK, GOOD_BLOCK])
        session = run_session(small_case, policy, goals_for(small_case))
        assert len(session.iterations) == 3
        assert session.round_outcomes[1] == RoundOutcome.GOALS_MET
        assert not session.iterations[0].goal_report.overall_pass
        assert session.iterations[2].goal_report.overall_pass

    def test_max_iter_validated(self, small_case):
        with pytest.raises(ProtocolError):
            SessionRunner(small_case, CannedPolicy([GOOD_BLOCK]), goals_for(small_case), max_iter=0)

    def test_prompt_hash_matches_prompt(self, small_case):
        session = run_session(small_case, CannedPolicy([GOOD_BLOCK]), goals_for(small_case))
        rec = session.iterations[0]
        assert rec.prompt_sha256 == hashlib.sha256(rec.prompt.encode()).hexdigest()

    def test_ring_materialized_for_the_session(self, small_case):
        runner = SessionRunner(small_case, CannedPolicy([GOOD_BLOCK]), goals_for(small_case))
        assert "Ring" in runner.case.structure_names()
        assert "Ring" not in small_case.structure_names()


class TestFormatErrorHandling:
    def test_retry_recovers_within_iteration(self, small_case):
        policy = FirstCallMalformed()
        rows = []
        session = run_session(
            small_case, policy, goals_for(small_case), trace_sink=rows.append
        )
        assert policy.calls == 2
        assert len(session.iterations) == 1
        assert session.iterations[0].format_error is False
        assert session.round_outcomes[1] == RoundOutcome.GOALS_MET
        # Both attempts leave a trace row: the failure, then the success.
        assert [r["format_error"] for r in rows] == [True, False]

    def test_double_failure_records_the_iteration(self, small_case):
        # Iteration 2 is malformed on the attempt and on the retry.
        policy = CannedPolicy([WEAK_BLOCK, MALFORMED, GOOD_BLOCK])
        rows = []
        session = run_session(
            small_case, policy, goals_for(small_case), trace_sink=rows.append
        )
        assert policy.calls == 4  # 1 + 2 (retry) + 1
        assert len(session.iterations) == 3
        bad = session.iterations[1]
        assert bad.format_error is True
        assert bad.metrics is None and bad.weights is None and bad.objectives is None
        assert bad.format_error_message
        assert [r["format_error"] for r in rows] == [False, True, True, False]
        # The plan state carried over: iteration 3 still converged.
        assert session.round_outcomes[1] == RoundOutcome.GOALS_MET
        assert session.selected[1] == 3

    def test_all_format_errors_leave_no_selectable_plan(self, small_case):
        policy = CannedPolicy([MALFORMED])
        runner = SessionRunner(small_case, policy, goals_for(small_case), max_iter=3)
        with pytest.raises(NoValidPlanError):
            runner.run()


class TestTransportHandling:
    def test_outage_fails_the_session_after_backoff(self, small_case):
        sleeps = []
        policy = TransportFlaky(failures=99)
        runner = SessionRunner(
            small_case, policy, goals_for(small_case), sleeper=sleeps.append
        )
        session = runner.run()
        assert session.status == SessionStatus.FAILED
        assert policy.calls == 3
        assert sleeps == [1.0, 2.0]
        assert session.iterations == []
        assert session.round_outcomes == {}

    def test_transient_outage_recovers(self, small_case):
        sleeps = []
        policy = TransportFlaky(failures=2)
        runner = SessionRunner(
            small_case, policy, goals_for(small_case), sleeper=sleeps.append
        )
        session = runner.run()
        assert session.status == SessionStatus.AWAITING_REVIEW
        assert sleeps == [1.0, 2.0]
        assert len(session.iterations) == 1


class TestDeterminism:
    def test_step_clock_advances_fixed_steps(self):
        clock = StepClock(step_s=0.5)
        assert [clock(), clock(), clock()] == [0.5, 1.0, 1.5]

    def test_scripted_policy_gets_step_clock(self, small_case):
        runner = SessionRunner(small_case, CannedPolicy([GOOD_BLOCK]), goals_for(small_case))
        assert isinstance(runner.timer, StepClock)

    def test_non_scripted_policy_gets_wall_clock(self, small_case):
        policy = CannedPolicy([GOOD_BLOCK], name="manual")
        runner = SessionRunner(small_case, policy, goals_for(small_case))
        assert runner.timer is time.perf_counter

    def test_scripted_traces_are_byte_identical(self, small_case):
        def run_once():
            rows = []
            run_session(
                small_case,
                ScriptedPolicy(),
                goals_for(small_case),
                trace_sink=rows.append,
            )
            return [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in rows]

        first = run_once()
        second = run_once()
        assert first == second
        assert first  # at least one iteration traced


class TestSelectBest:
    def make_record(self, index, coverage, dmax, ci, goals):
        metrics = MetricsReport(
            coverage_pct=coverage,
            dmax_gy=dmax,
            ci=ci,
            gi=3.0,
            v12_cc=5.0,
            oar_dmax_gy={
                "Brainstem": 4.0,
                "OpticChiasm": 2.0,
                "OpticNerveL": 2.0,
                "OpticNerveR": 2.0,
                "CochleaL": 2.0,
                "CochleaR": 2.0,
            },
        )
        report = check_goals(metrics, goals)
        return IterationRecord(
            round=1, index=index, prompt="", prompt_sha256="", raw_output="",
            rationale="", objectives=None, format_error=False, format_error_message=None,
            weights=np.zeros(1), metrics=metrics, goal_report=report, duration_ms=1,
        )

    def session_with(self, records, goals):
        return PlanningSession(
            id="sel", case_id="sel", goals=goals, policy_name="scripted-test",
            iterations=records,
        )

    def test_most_goals_passed_wins(self):
        goals = default_goals()
        records = [
            self.make_record(1, coverage=96.0, dmax=25.0, ci=0.5, goals=goals),
            self.make_record(2, coverage=96.0, dmax=21.0, ci=0.5, goals=goals),
        ]
        assert select_best(self.session_with(records, goals), 1) == 2

    def test_smaller_deficiency_breaks_tie(self):
        goals = default_goals()
        records = [
            self.make_record(1, coverage=80.0, dmax=21.0, ci=0.5, goals=goals),
            self.make_record(2, coverage=94.0, dmax=21.0, ci=0.5, goals=goals),
        ]
        assert select_best(self.session_with(records, goals), 1) == 2

    def test_higher_ci_breaks_tie(self):
        goals = default_goals()
        records = [
            self.make_record(1, coverage=96.0, dmax=21.0, ci=0.5, goals=goals),
            self.make_record(2, coverage=96.0, dmax=21.0, ci=0.8, goals=goals),
        ]
        assert select_best(self.session_with(records, goals), 1) == 2

    def test_earliest_wins_on_full_tie(self):
        goals = default_goals()
        records = [
            self.make_record(1, coverage=96.0, dmax=21.0, ci=0.5, goals=goals),
            self.make_record(2, coverage=96.0, dmax=21.0, ci=0.5, goals=goals),
        ]
        assert select_best(self.session_with(records, goals), 1) == 1

    def test_no_metric_bearing_iterations(self):
        goals = default_goals()
        with pytest.raises(NoValidPlanError):
            select_best(self.session_with([], goals), 1)


class TestRefinement:
    def run_round_one(self, case, blocks=None):
        policy = CannedPolicy(blocks or [GOOD_BLOCK])
        runner = SessionRunner(case, policy, goals_for(case))
        runner.run()
        return runner

    def test_refine_runs_a_second_round(self, small_case):
        runner = self.run_round_one(small_case)
        session = runner.refine()
        assert session.round == 2
        assert session.status == SessionStatus.AWAITING_REVIEW
        assert session.refinement_text == STANDARD_REFINEMENT_TEXT
        assert 2 in session.selected and 2 in session.round_outcomes
        assert all(r.round == 2 for r in session.round_iterations(2))
        assert session.round_iterations(2)

    def test_refine_requires_awaiting_review(self, small_case):
        runner = self.run_round_one(small_case)
        runner.session.status = SessionStatus.ACCEPTED
        with pytest.raises(ProtocolError):
            runner.refine()

    def test_refine_rejects_empty_text(self, small_case):
        runner = self.run_round_one(small_case)
        with pytest.raises(ProtocolError):
            runner.refine("")

    def test_nonstandard_text_warns_but_applies(self, small_case, caplog):
        runner = self.run_round_one(small_case)
        with caplog.at_level(logging.WARNING, logger="srsplan.agent"):
            session = runner.refine("Try harder on conformity, please.")
        assert session.refinement_text == "Try harder on conformity, please."
        assert any("standard" in r.message for r in caplog.records)

    def test_round_two_prompts_carry_feedback(self, small_case):
        runner = self.run_round_one(small_case)
        runner.refine()
        rec = runner.session.round_iterations(2)[0]
        assert "## Reviewer feedback" in rec.prompt
        assert STANDARD_REFINEMENT_TEXT in rec.prompt

    def test_resume_rebuilds_plan_state(self, small_case):
        runner = self.run_round_one(small_case)
        session = runner.session
        resumed = SessionRunner.resume(
            session, small_case, CannedPolicy([GOOD_BLOCK])
        )
        assert resumed.session is session
        best = session.selected_record(1)
        assert np.array_equal(resumed.weights, best.weights)
        assert resumed.latest_metrics is best.metrics
        assert len(resumed.memory) == len([r for r in session.iterations if r.metrics is not None])
        refined = resumed.refine()
        assert refined.round == 2
        assert refined.status == SessionStatus.AWAITING_REVIEW
