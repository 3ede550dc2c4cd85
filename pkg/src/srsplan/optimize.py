"""Inverse optimizer: dose-volume objectives, quadratic penalty, projected
gradient descent on beam weights, and the ring-structure helper used to
tighten conformity.

Objective semantics follow the usual treatment-planning convention:

* lower objective (dose d at volume v%): the hottest v% of the structure
  must all receive at least d. The penalty averages squared shortfall over
  that hottest-v% subset.
* upper objective (dose d at volume v%): at most v% of the structure may
  exceed d. The hottest v% is exempt; the penalty averages squared excess
  over the remaining voxels.

Either way the term is zero exactly when the objective is met at its volume
level, and cost = sum over objectives of priority * mean(violation^2).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .cases import Case, StructureMask, StructureRole
from .dose import DoseDistribution, DoseInfluence, validate_weights
from .errors import InvalidObjectivesError, InvalidSpecError

logger = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = 200
#: EDT measures to the nearest inside voxel center, which sits about a
#: quarter voxel inside the true surface on average; correct for that.
SURFACE_BIAS_VOXELS = 0.25

OBJECTIVE_KINDS = ("upper", "lower")


@dataclass(frozen=True)
class Objective:
    structure: str
    kind: str  # "upper" | "lower"
    dose_gy: float
    volume_pct: float
    priority: int

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise InvalidObjectivesError(f"objective kind must be upper or lower, got {self.kind!r}")
        if not (self.dose_gy >= 0 and math.isfinite(self.dose_gy)):
            raise InvalidObjectivesError(f"objective dose must be finite and >= 0, got {self.dose_gy}")
        if not 0 <= self.volume_pct <= 100:
            raise InvalidObjectivesError(f"volume_pct must be in [0, 100], got {self.volume_pct}")
        if not (isinstance(self.priority, (int, np.integer)) and 0 <= self.priority <= 100):
            raise InvalidObjectivesError(f"priority must be an integer in [0, 100], got {self.priority!r}")


@dataclass(frozen=True)
class ObjectiveSet:
    objectives: tuple[Objective, ...]

    def __post_init__(self):
        object.__setattr__(self, "objectives", tuple(self.objectives))

    def __iter__(self):
        return iter(self.objectives)

    def __len__(self):
        return len(self.objectives)

    def validate_against(self, case: Case) -> None:
        names = set(case.structure_names())
        for o in self.objectives:
            if o.structure not in names:
                raise InvalidObjectivesError(f"objective references unknown structure {o.structure!r}")

    def require_ptv_lower(self, case: Case) -> None:
        for o in self.objectives:
            if o.kind == "lower" and case.structure(o.structure).role == StructureRole.PTV:
                return
        raise InvalidObjectivesError("objective set must include a lower objective on the PTV")


@dataclass(frozen=True)
class RingSpec:
    inner_margin_mm: float
    outer_margin_mm: float

    def __post_init__(self):
        if not (0 <= self.inner_margin_mm < self.outer_margin_mm):
            raise InvalidSpecError(
                f"ring margins must satisfy 0 <= inner < outer, got ({self.inner_margin_mm}, {self.outer_margin_mm})"
            )


# ---------------------------------------------------------------------------
# Objective JSON schema (also the wire format a planning policy must emit)
# ---------------------------------------------------------------------------

def objective_to_dict(o: Objective) -> dict:
    return {
        "structure": o.structure,
        "kind": o.kind,
        "dose_gy": o.dose_gy,
        "volume_pct": o.volume_pct,
        "priority": o.priority,
    }


def objectives_to_json(objectives: ObjectiveSet) -> str:
    return json.dumps([objective_to_dict(o) for o in objectives], sort_keys=True)


def objective_from_obj(obj) -> Objective:
    if not isinstance(obj, dict):
        raise InvalidObjectivesError(f"objective must be a JSON object, got {type(obj).__name__}")
    required = {"structure", "kind", "dose_gy", "volume_pct", "priority"}
    missing = required - obj.keys()
    if missing:
        raise InvalidObjectivesError(f"objective missing fields: {sorted(missing)}")
    extra = obj.keys() - required
    if extra:
        raise InvalidObjectivesError(f"objective has unknown fields: {sorted(extra)}")
    structure = obj["structure"]
    if not isinstance(structure, str) or not structure:
        raise InvalidObjectivesError("objective structure must be a non-empty string")
    dose = obj["dose_gy"]
    volume = obj["volume_pct"]
    priority = obj["priority"]
    if isinstance(dose, bool) or not isinstance(dose, (int, float)):
        raise InvalidObjectivesError(f"dose_gy must be a number, got {dose!r}")
    if isinstance(volume, bool) or not isinstance(volume, (int, float)):
        raise InvalidObjectivesError(f"volume_pct must be a number, got {volume!r}")
    if isinstance(priority, bool) or not isinstance(priority, int):
        raise InvalidObjectivesError(f"priority must be an integer, got {priority!r}")
    return Objective(
        structure=structure,
        kind=obj["kind"],
        dose_gy=float(dose),
        volume_pct=float(volume),
        priority=priority,
    )


def objectives_from_obj(payload) -> ObjectiveSet:
    if not isinstance(payload, list) or not payload:
        raise InvalidObjectivesError("objectives must be a non-empty JSON array")
    return ObjectiveSet(tuple(objective_from_obj(item) for item in payload))


def objectives_from_json(text: str) -> ObjectiveSet:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidObjectivesError(f"objectives are not valid JSON: {exc}") from exc
    return objectives_from_obj(payload)


def save_objectives(objectives: ObjectiveSet, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([objective_to_dict(o) for o in objectives], indent=1, sort_keys=True))
    return path


def load_objectives(path: str | Path) -> ObjectiveSet:
    return objectives_from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# Penalty
# ---------------------------------------------------------------------------

def _selection_size(n: int, o: Objective) -> int:
    """Number of penalized voxels for an objective on an n-voxel structure."""
    if o.kind == "lower":
        return min(n, math.ceil(n * o.volume_pct / 100.0))
    allowed_hot = min(n, math.floor(n * o.volume_pct / 100.0))
    return n - allowed_hot


def _selected_indices(doses: np.ndarray, o: Objective) -> np.ndarray:
    """Indices (into the structure's voxel list) the objective penalizes."""
    n = doses.size
    k = _selection_size(n, o)
    if k <= 0:
        return np.empty(0, dtype=np.intp)
    if k >= n:
        return np.arange(n, dtype=np.intp)
    if o.kind == "lower":
        return np.argpartition(doses, n - k)[n - k :]  # hottest k
    return np.argpartition(doses, k)[:k]  # coldest k (hottest are exempt)


def _objective_term(doses: np.ndarray, o: Objective) -> float:
    sel = _selected_indices(doses, o)
    if sel.size == 0:
        return 0.0
    d = doses[sel]
    viol = np.maximum(d - o.dose_gy, 0.0) if o.kind == "upper" else np.maximum(o.dose_gy - d, 0.0)
    return float(o.priority * np.mean(viol * viol))


def objective_cost_from_doses(structure_doses: dict[str, np.ndarray], objectives: ObjectiveSet) -> float:
    return sum(_objective_term(structure_doses[o.structure], o) for o in objectives)


def structure_dose_vectors(dose: DoseDistribution, case: Case, names: Iterable[str]) -> dict[str, np.ndarray]:
    out = {}
    for name in set(names):
        out[name] = dose.dose[case.structure(name).mask]
    return out


def objective_cost(dose: DoseDistribution, case: Case, objectives: ObjectiveSet) -> float:
    """Total penalty; zero iff every objective is met at its volume level."""
    objectives.validate_against(case)
    vectors = structure_dose_vectors(dose, case, (o.structure for o in objectives))
    return objective_cost_from_doses(vectors, objectives)


# ---------------------------------------------------------------------------
# Projected gradient descent
# ---------------------------------------------------------------------------

class _PenaltyModel:
    """Cost and gradient in weight space, using per-structure influence slices
    so inner iterations never touch the full grid."""

    def __init__(self, influence: DoseInfluence, case: Case, objectives: ObjectiveSet):
        self.objectives = list(objectives)
        self.columns: dict[str, np.ndarray] = {}
        flat = influence.per_beam.reshape(influence.beam_count, -1)
        for name in {o.structure for o in self.objectives}:
            mask = case.structure(name).mask.ravel()
            self.columns[name] = np.ascontiguousarray(flat[:, mask])  # (n_beams, n_voxels)

    def doses(self, w: np.ndarray) -> dict[str, np.ndarray]:
        return {name: w @ cols for name, cols in self.columns.items()}

    def cost(self, w: np.ndarray) -> float:
        return objective_cost_from_doses(self.doses(w), ObjectiveSet(tuple(self.objectives)))

    def cost_and_grad(self, w: np.ndarray) -> tuple[float, np.ndarray]:
        doses = self.doses(w)
        total = 0.0
        grad = np.zeros_like(w)
        for o in self.objectives:
            d = doses[o.structure]
            sel = _selected_indices(d, o)
            if sel.size == 0:
                continue
            ds = d[sel]
            if o.kind == "upper":
                viol = np.maximum(ds - o.dose_gy, 0.0)
                sign = 1.0
            else:
                viol = np.maximum(o.dose_gy - ds, 0.0)
                sign = -1.0
            total += o.priority * float(np.mean(viol * viol))
            if o.priority > 0 and viol.any():
                # d term/d dose_i = 2*sign*viol_i / |sel|; chain through dose = w @ cols
                coef = (2.0 * sign * o.priority / sel.size) * viol
                grad += self.columns[o.structure][:, sel] @ coef
        return total, grad


def optimize_weights(
    influence: DoseInfluence,
    case: Case,
    objectives: ObjectiveSet,
    max_steps: int = DEFAULT_MAX_STEPS,
    initial_weights: Sequence[float] | None = None,
) -> np.ndarray:
    """Minimize the penalty over nonnegative beam weights.

    Fixed step size chosen from the first gradient's scale, halved whenever a
    step would increase the cost; weights are clamped at zero after every
    step. Returns the best weights seen, so the result never costs more than
    the start. Deterministic for fixed inputs."""
    if max_steps < 1:
        raise InvalidObjectivesError(f"max_steps must be >= 1, got {max_steps}")
    if len(objectives) == 0:
        raise InvalidObjectivesError("objective set is empty")
    objectives.validate_against(case)
    objectives.require_ptv_lower(case)

    if initial_weights is None:
        w = np.ones(influence.beam_count, dtype=float)
    else:
        w = validate_weights(initial_weights, influence.beam_count).copy()

    model = _PenaltyModel(influence, case, objectives)
    cost, grad = model.cost_and_grad(w)
    best_w, best_cost = w.copy(), cost
    if cost == 0.0:
        return best_w

    gnorm = float(np.linalg.norm(grad))
    if gnorm == 0.0:
        return best_w
    step = 0.25 * (float(np.linalg.norm(w)) + 1.0) / gnorm

    for _ in range(max_steps):
        candidate = np.maximum(w - step * grad, 0.0)
        new_cost = model.cost(candidate)
        halvings = 0
        while new_cost > cost and halvings < 40:
            step *= 0.5
            halvings += 1
            candidate = np.maximum(w - step * grad, 0.0)
            new_cost = model.cost(candidate)
        if new_cost > cost or not np.any(candidate != w):
            break
        w = candidate
        cost, grad = model.cost_and_grad(w)
        if cost < best_cost:
            best_cost = cost
            best_w = w.copy()
        if cost == 0.0 or float(np.linalg.norm(grad)) == 0.0:
            break

    logger.debug("optimize_weights: cost %.6g -> %.6g", model.cost(np.ones_like(w)), best_cost)
    return best_w


# ---------------------------------------------------------------------------
# Ring structure
# ---------------------------------------------------------------------------

def create_ring(case: Case, spec: RingSpec) -> StructureMask:
    """Shell around the PTV: voxels whose distance to the PTV surface lies in
    (inner_margin, outer_margin], PTV voxels excluded."""
    ptv = case.ptv.mask
    spacing = np.asarray(case.grid.spacing, dtype=float)
    edt = ndimage.distance_transform_edt(~ptv, sampling=spacing)
    surface_dist = edt - SURFACE_BIAS_VOXELS * float(spacing.mean())
    ring = (~ptv) & (surface_dist > spec.inner_margin_mm) & (surface_dist <= spec.outer_margin_mm)
    return StructureMask(name="Ring", role=StructureRole.RING, mask=ring)
