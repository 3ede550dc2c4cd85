import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srsplan.cases import Case, StructureMask, StructureRole, VoxelGrid, ellipsoid_mask
from srsplan.dose import DoseDistribution, compose_dose
from srsplan.errors import InvalidObjectivesError, InvalidSpecError
from srsplan.optimize import (
    Objective,
    ObjectiveSet,
    RingSpec,
    create_ring,
    load_objectives,
    objective_cost,
    objective_cost_from_doses,
    objective_from_obj,
    objectives_from_json,
    optimize_weights,
    save_objectives,
)


def brute_force_cost(doses_by_structure, objectives):
    """Independent re-derivation by full sorting (no argpartition)."""
    total = 0.0
    for o in objectives:
        d = np.sort(doses_by_structure[o.structure])[::-1]  # hottest first
        n = d.size
        if o.kind == "lower":
            k = min(n, math.ceil(n * o.volume_pct / 100.0))
            subset = d[:k]
            viol = np.maximum(o.dose_gy - subset, 0.0)
        else:
            exempt = min(n, math.floor(n * o.volume_pct / 100.0))
            subset = d[exempt:]
            viol = np.maximum(subset - o.dose_gy, 0.0)
        if subset.size:
            total += o.priority * float(np.mean(viol**2))
    return total


class TestObjectiveValidation:
    def test_bad_kind(self):
        with pytest.raises(InvalidObjectivesError):
            Objective("PTV", "exact", 18.0, 99.0, 50)

    def test_negative_dose(self):
        with pytest.raises(InvalidObjectivesError):
            Objective("PTV", "lower", -1.0, 99.0, 50)

    def test_volume_out_of_range(self):
        with pytest.raises(InvalidObjectivesError):
            Objective("PTV", "lower", 18.0, 101.0, 50)

    def test_priority_not_integer(self):
        with pytest.raises(InvalidObjectivesError):
            Objective("PTV", "lower", 18.0, 99.0, 50.5)

    def test_priority_out_of_range(self):
        with pytest.raises(InvalidObjectivesError):
            Objective("PTV", "lower", 18.0, 99.0, 101)

    def test_from_obj_missing_field(self):
        with pytest.raises(InvalidObjectivesError):
            objective_from_obj({"structure": "PTV", "kind": "lower", "dose_gy": 18.0, "volume_pct": 99.0})

    def test_from_obj_extra_field(self):
        with pytest.raises(InvalidObjectivesError):
            objective_from_obj(
                {"structure": "PTV", "kind": "lower", "dose_gy": 18.0, "volume_pct": 99.0,
                 "priority": 10, "bonus": 1}
            )

    def test_from_obj_bool_dose_rejected(self):
        with pytest.raises(InvalidObjectivesError):
            objective_from_obj(
                {"structure": "PTV", "kind": "lower", "dose_gy": True, "volume_pct": 99.0, "priority": 10}
            )

    def test_empty_set_rejected(self):
        with pytest.raises(InvalidObjectivesError):
            objectives_from_json("[]")

    def test_unknown_structure_rejected(self, small_case):
        objs = ObjectiveSet((Objective("Nowhere", "lower", 18.0, 99.0, 50),))
        with pytest.raises(InvalidObjectivesError):
            objs.validate_against(small_case)

    def test_require_ptv_lower(self, small_case):
        objs = ObjectiveSet((Objective("Brain", "upper", 12.0, 1.0, 50),))
        with pytest.raises(InvalidObjectivesError):
            objs.require_ptv_lower(small_case)


class TestObjectiveCost:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 400))
        doses = {"S": rng.gamma(2.0, 4.0, n)}
        objectives = []
        for _ in range(int(rng.integers(1, 5))):
            objectives.append(
                Objective(
                    structure="S",
                    kind=str(rng.choice(["upper", "lower"])),
                    dose_gy=float(rng.uniform(0, 25)),
                    volume_pct=float(rng.uniform(0, 100)),
                    priority=int(rng.integers(0, 101)),
                )
            )
        objs = ObjectiveSet(tuple(objectives))
        assert objective_cost_from_doses(doses, objs) == pytest.approx(
            brute_force_cost(doses, objs), rel=1e-12, abs=1e-12
        )

    def test_lower_penalizes_hottest_subset_only(self):
        # 10 voxels; lower 10 Gy at 30% -> hottest 3 must reach 10.
        doses = {"S": np.array([1.0, 2, 3, 4, 5, 6, 7, 8, 9, 9.5])}
        objs = ObjectiveSet((Objective("S", "lower", 10.0, 30.0, 1),))
        expected = np.mean((10.0 - np.array([9.5, 9.0, 8.0])) ** 2)
        assert objective_cost_from_doses(doses, objs) == pytest.approx(expected)

    def test_upper_exempts_hottest_subset(self):
        # upper 5 Gy at 20% of 10 voxels -> hottest 2 exempt, rest penalized.
        doses = {"S": np.array([1.0, 2, 3, 4, 5, 6, 7, 8, 9, 10])}
        objs = ObjectiveSet((Objective("S", "upper", 5.0, 20.0, 1),))
        expected = np.mean(np.maximum(np.array([1.0, 2, 3, 4, 5, 6, 7, 8]) - 5.0, 0.0) ** 2)
        assert objective_cost_from_doses(doses, objs) == pytest.approx(expected)

    def test_zero_iff_met(self):
        doses = {"S": np.array([18.0, 18.5, 19.0, 2.0])}
        met = ObjectiveSet((Objective("S", "lower", 18.0, 75.0, 80),))
        assert objective_cost_from_doses(doses, met) == 0.0
        unmet = ObjectiveSet((Objective("S", "lower", 18.0, 76.0, 80),))
        assert objective_cost_from_doses(doses, unmet) > 0.0

    def test_priority_zero_contributes_nothing(self):
        doses = {"S": np.array([0.0, 0.0])}
        objs = ObjectiveSet((Objective("S", "lower", 18.0, 100.0, 0),))
        assert objective_cost_from_doses(doses, objs) == 0.0

    def test_cost_on_distribution(self, small_case, unit_dose):
        objs = ObjectiveSet((Objective("PTV", "lower", 5.0, 99.0, 10),))
        cost = objective_cost(unit_dose, small_case, objs)
        assert cost >= 0.0


class TestOptimizer:
    def make_objectives(self, rx=18.0):
        return ObjectiveSet(
            (
                Objective("PTV", "lower", rx + 0.4, 99.0, 80),
                Objective("PTV", "upper", 1.16 * rx, 1.0, 30),
                Objective("Brain", "upper", 12.0, 1.5, 25),
            )
        )

    def test_reduces_cost_from_cold_start(self, small_case, small_influence):
        objs = self.make_objectives()
        start = np.full(len(small_case.beams), 0.01)
        start_cost = objective_cost(compose_dose(small_influence, start), small_case, objs)
        w = optimize_weights(small_influence, small_case, objs, initial_weights=start)
        end_cost = objective_cost(compose_dose(small_influence, w), small_case, objs)
        assert end_cost < start_cost

    def test_weights_nonnegative(self, small_case, small_influence):
        w = optimize_weights(small_influence, small_case, self.make_objectives())
        assert np.all(w >= 0.0)

    def test_deterministic(self, small_case, small_influence):
        a = optimize_weights(small_influence, small_case, self.make_objectives())
        b = optimize_weights(small_influence, small_case, self.make_objectives())
        assert np.array_equal(a, b)

    def test_never_worse_than_start(self, small_case, small_influence):
        objs = self.make_objectives()
        start = np.ones(len(small_case.beams))
        start_cost = objective_cost(compose_dose(small_influence, start), small_case, objs)
        w = optimize_weights(small_influence, small_case, objs, initial_weights=start, max_steps=3)
        end_cost = objective_cost(compose_dose(small_influence, w), small_case, objs)
        assert end_cost <= start_cost + 1e-12

    def test_requires_ptv_lower(self, small_case, small_influence):
        objs = ObjectiveSet((Objective("Brain", "upper", 12.0, 1.5, 25),))
        with pytest.raises(InvalidObjectivesError):
            optimize_weights(small_influence, small_case, objs)

    def test_rejects_unknown_structure(self, small_case, small_influence):
        objs = ObjectiveSet(
            (
                Objective("PTV", "lower", 18.0, 99.0, 80),
                Objective("Ghost", "upper", 1.0, 0.0, 10),
            )
        )
        with pytest.raises(InvalidObjectivesError):
            optimize_weights(small_influence, small_case, objs)

    def test_rejects_bad_max_steps(self, small_case, small_influence):
        with pytest.raises(InvalidObjectivesError):
            optimize_weights(small_influence, small_case, self.make_objectives(), max_steps=0)


class TestRing:
    def test_spec_validation(self):
        with pytest.raises(InvalidSpecError):
            RingSpec(inner_margin_mm=2.0, outer_margin_mm=2.0)
        with pytest.raises(InvalidSpecError):
            RingSpec(inner_margin_mm=-1.0, outer_margin_mm=2.0)

    def test_ring_disjoint_from_ptv(self, small_case):
        ring = create_ring(small_case, RingSpec(0.0, 3.0))
        assert ring.role == StructureRole.RING
        assert not (ring.mask & small_case.ptv.mask).any()
        assert ring.mask.any()

    def test_ring_shell_volume_near_analytic(self):
        """(0, 2] mm shell around a 10 mm sphere on a 1 mm grid: volume close
        to the analytic 4/3 pi (12^3 - 10^3)."""
        grid = VoxelGrid(dims=(40, 40, 40), spacing=(1.0, 1.0, 1.0), origin=(-20, -20, -20))
        brain = ellipsoid_mask(grid, (0, 0, 0), 19.0)
        ptv = ellipsoid_mask(grid, (0, 0, 0), 10.0)
        case = Case(
            id="shell",
            grid=grid,
            structures=[
                StructureMask("Brain", StructureRole.BRAIN, brain),
                StructureMask("PTV", StructureRole.PTV, ptv),
            ],
            prescription_gy=18.0,
            beams=[],
        )
        ring = create_ring(case, RingSpec(0.0, 2.0))
        analytic = 4.0 / 3.0 * np.pi * (12.0**3 - 10.0**3)
        assert float(ring.mask.sum()) == pytest.approx(analytic, rel=0.10)

    def test_inner_margin_leaves_gap(self, small_case):
        near = create_ring(small_case, RingSpec(0.0, 3.0))
        far = create_ring(small_case, RingSpec(3.0, 6.0))
        assert not (near.mask & far.mask).any()


class TestObjectiveSerialization:
    def test_roundtrip(self, tmp_path):
        objs = ObjectiveSet(
            (
                Objective("PTV", "lower", 18.4, 99.0, 80),
                Objective("Ring", "upper", 14.8, 0.0, 55),
            )
        )
        path = save_objectives(objs, tmp_path / "objs.json")
        assert load_objectives(path) == objs

    def test_json_text_roundtrip(self):
        payload = [
            {"structure": "PTV", "kind": "lower", "dose_gy": 18.0, "volume_pct": 99.0, "priority": 80}
        ]
        objs = objectives_from_json(json.dumps(payload))
        assert len(objs) == 1
        assert objs.objectives[0].structure == "PTV"
