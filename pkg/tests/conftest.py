import json

import numpy as np
import pytest

from srsplan.agent import SessionRunner
from srsplan.cases import CohortSpec, generate_synthetic_case, sample_case_spec
from srsplan.dose import DoseDistribution, compute_influence
from srsplan.metrics import default_goals
from srsplan.policies import ScriptedPolicy
from srsplan.store import SessionStore

FAST_SPEC = CohortSpec(grid_dims=(40, 40, 40), ptv_radius_range_mm=(4.5, 5.5))


def make_case(case_id: str = "t-small", seed: int = 42, cohort: CohortSpec = FAST_SPEC):
    return generate_synthetic_case(sample_case_spec(cohort, case_id=case_id, seed=seed))


@pytest.fixture(scope="session")
def small_case():
    """One fast 40mm-cube case shared by read-only tests."""
    return make_case()


@pytest.fixture(scope="session")
def small_influence(small_case):
    return compute_influence(small_case)


@pytest.fixture(scope="session")
def unit_dose(small_case, small_influence):
    from srsplan.dose import compose_dose

    return compose_dose(small_influence, np.ones(len(small_case.beams)))


@pytest.fixture
def store(tmp_path):
    return SessionStore(tmp_path / "store")


@pytest.fixture(scope="session")
def planned_store(tmp_path_factory):
    """A store holding one completed round-1 session, for review/CLI tests."""
    root = tmp_path_factory.mktemp("planned-store")
    st = SessionStore(root)
    case = make_case("t-planned", seed=7)
    runner = SessionRunner(
        case, ScriptedPolicy(), default_goals(), trace_sink=st.trace_sink(case.id)
    )
    runner.run()
    st.save(runner.session, runner.case)
    return st


def random_dose(rng: np.random.Generator, grid) -> DoseDistribution:
    field = rng.gamma(shape=2.0, scale=4.0, size=grid.dims)
    return DoseDistribution(grid=grid, dose=field)


class CannedPolicy:
    """Test policy emitting a fixed JSON block per iteration number.

    blocks: list of raw output strings; iteration i uses blocks[min(i-1, len-1)].
    The name starts with "scripted" so sessions get the deterministic clock.
    """

    temperature = 0.4
    top_k = 2

    def __init__(self, blocks, name="scripted-canned"):
        self.blocks = list(blocks)
        self.name = name
        self.calls = 0

    def propose(self, prompt: str) -> str:
        from srsplan.prompts import extract_state

        state = extract_state(prompt)
        iteration = int(state.get("iteration", 1))
        self.calls += 1
        return self.blocks[min(iteration - 1, len(self.blocks) - 1)]


def objective_block(objectives, rationale="Adjusting the plan.") -> str:
    return f"{rationale}\n```json\n{json.dumps(objectives)}\n```\n"


GOOD_OBJECTIVES = [
    {"structure": "PTV", "kind": "lower", "dose_gy": 18.4, "volume_pct": 99.0, "priority": 80},
    {"structure": "PTV", "kind": "upper", "dose_gy": 20.9, "volume_pct": 1.0, "priority": 30},
    {"structure": "Brain", "kind": "upper", "dose_gy": 12.0, "volume_pct": 1.5, "priority": 25},
]

WEAK_OBJECTIVES = [
    {"structure": "PTV", "kind": "lower", "dose_gy": 2.0, "volume_pct": 99.0, "priority": 10},
    {"structure": "Brain", "kind": "upper", "dose_gy": 4.0, "volume_pct": 0.0, "priority": 90},
]
