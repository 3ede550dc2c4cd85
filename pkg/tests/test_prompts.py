import json

import pytest

from srsplan.errors import ProtocolError
from srsplan.metrics import check_goals, compute_metrics, default_goals
from srsplan.prompts import (
    STANDARD_REFINEMENT_TEXT,
    build_prompt,
    case_scenario,
    extract_state,
)

from conftest import GOOD_OBJECTIVES


class TestScenario:
    def test_scenario_fields(self, small_case):
        scenario = case_scenario(small_case)
        assert scenario["case_id"] == small_case.id
        assert scenario["prescription_gy"] == small_case.prescription_gy
        assert scenario["ptv_volume_cc"] > 0
        assert any("distance_to_ptv_mm" in s for s in scenario["structures"])


class TestBuildPrompt:
    def test_round1_sections(self, small_case):
        goals = default_goals()
        prompt = build_prompt(small_case, goals, [], 1)
        for heading in ("## Structures", "## Clinical goals", "## Output format"):
            assert heading in prompt
        assert "## Reviewer feedback" not in prompt
        assert "```state" in prompt

    def test_state_block_roundtrip(self, small_case):
        goals = default_goals()
        prompt = build_prompt(small_case, goals, [], 1, iteration_number=4)
        state = extract_state(prompt)
        assert state["round"] == 1
        assert state["iteration"] == 4
        assert state["scenario"]["case_id"] == small_case.id
        assert "PTV" in state["allowed_structures"]
        assert "Ring" not in state["allowed_structures"] or any(
            s.name == "Ring" for s in small_case.structures
        )

    def test_round2_requires_feedback_text(self, small_case):
        goals = default_goals()
        with pytest.raises(ProtocolError):
            build_prompt(small_case, goals, [], 2)
        prompt = build_prompt(small_case, goals, [], 2, refinement_text=STANDARD_REFINEMENT_TEXT)
        assert "## Reviewer feedback" in prompt
        assert STANDARD_REFINEMENT_TEXT in prompt

    def test_metrics_and_goal_marks_shown(self, small_case, unit_dose):
        goals = default_goals()
        report = compute_metrics(unit_dose, small_case)
        checked = check_goals(report, goals)
        prompt = build_prompt(
            small_case, goals, [], 1, latest_metrics=report, latest_check=checked
        )
        state = extract_state(prompt)
        assert state["latest_metrics"]["coverage"] == pytest.approx(report.coverage_pct)
        assert len(state["goal_check"]) == len(goals)

    def test_memory_digest_last_k_plus_best(self, small_case):
        goals = default_goals()
        memory = []
        for i in range(8):
            flat = {"coverage": 50.0 + i if i != 2 else 99.9, "ci": 0.5, "dmax": 20.0}
            memory.append((list(GOOD_OBJECTIVES), flat))
        prompt = build_prompt(small_case, goals, memory, 1, memory_k=5, iteration_number=9)
        state = extract_state(prompt)
        digest = state["memory"]
        iterations = [e["iteration"] for e in digest]
        assert iterations[-5:] == [4, 5, 6, 7, 8]
        # iteration 3 (index 2) had the best coverage and is carried as "best"
        assert any(e["iteration"] == 3 and e.get("best") for e in digest)

    def test_missing_state_block_raises(self):
        with pytest.raises(ProtocolError):
            extract_state("no block here")

    def test_state_json_is_sorted_and_parseable(self, small_case):
        prompt = build_prompt(small_case, default_goals(), [], 1)
        block = prompt.split("```state\n", 1)[1].split("\n```", 1)[0]
        parsed = json.loads(block)
        assert json.dumps(parsed, sort_keys=True) == json.dumps(parsed)
