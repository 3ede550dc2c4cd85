"""Plan evaluation: DVH curves, dosimetric metrics, and clinical-goal checks.

All metrics use exact voxel counting on the dose grid; no interpolation.
Conformity is the Paddick index (TV_PIV)^2 / (TV * PIV) and the gradient
index is V50% / V100%. The seven organ-at-risk endpoints are maximum dose to
brainstem, optic chiasm, both optic nerves, and both cochleae, plus V12Gy of
normal brain (Brain minus GTV).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .cases import Case, StructureMask, StructureRole, subtract_masks
from .dose import DoseDistribution
from .errors import (
    EmptyStructureError,
    GeometryError,
    InvalidGoalSetError,
    UndefinedMetricError,
)

DEFAULT_BIN_WIDTH_GY = 0.1

#: Metric ids, also the CSV vocabulary the stats harness consumes.
PRIMARY_METRICS = ("coverage", "dmax", "ci", "gi")
SECONDARY_METRICS = (
    "dmax_brainstem",
    "dmax_optic_chiasm",
    "dmax_optic_nerve_l",
    "dmax_optic_nerve_r",
    "dmax_cochlea_l",
    "dmax_cochlea_r",
    "v12",
)

_ROLE_METRIC = {
    StructureRole.BRAINSTEM: "dmax_brainstem",
    StructureRole.OPTIC_CHIASM: "dmax_optic_chiasm",
    StructureRole.OPTIC_NERVE_L: "dmax_optic_nerve_l",
    StructureRole.OPTIC_NERVE_R: "dmax_optic_nerve_r",
    StructureRole.COCHLEA_L: "dmax_cochlea_l",
    StructureRole.COCHLEA_R: "dmax_cochlea_r",
}


@dataclass
class DVHCurve:
    """Cumulative DVH: fraction of structure volume receiving >= each threshold."""

    structure: str
    bin_width_gy: float
    thresholds_gy: np.ndarray
    fractions: np.ndarray

    def fraction_at(self, dose_gy: float) -> float:
        """Fraction of volume receiving at least dose_gy (step lookup)."""
        idx = np.searchsorted(self.thresholds_gy, dose_gy, side="right") - 1
        if idx < 0:
            return 1.0
        return float(self.fractions[min(idx, self.fractions.size - 1)])

    def to_dict(self) -> dict:
        return {
            "structure": self.structure,
            "bin_width_gy": self.bin_width_gy,
            "thresholds_gy": [float(t) for t in self.thresholds_gy],
            "fractions": [float(f) for f in self.fractions],
        }


def compute_dvh(dose: DoseDistribution, mask: StructureMask, bin_width_gy: float = DEFAULT_BIN_WIDTH_GY) -> DVHCurve:
    """Exact-counting cumulative DVH. The curve starts at 1.0 for 0 Gy and
    ends at 0 one bin above the structure maximum."""
    if bin_width_gy <= 0:
        raise ValueError(f"bin width must be positive, got {bin_width_gy}")
    if mask.mask.shape != dose.dose.shape:
        raise GeometryError(f"mask shape {mask.mask.shape} != dose shape {dose.dose.shape}")
    values = dose.dose[mask.mask]
    if values.size == 0:
        raise EmptyStructureError(f"structure {mask.name!r} has no voxels")
    top = float(values.max())
    n_bins = int(math.floor(top / bin_width_gy)) + 2
    thresholds = np.arange(n_bins) * bin_width_gy
    # Float edges can leave the last bin nonzero; extend until it is empty.
    while np.count_nonzero(values >= thresholds[-1]) > 0:
        thresholds = np.append(thresholds, thresholds[-1] + bin_width_gy)
    counts = (values[None, :] >= thresholds[:, None]).sum(axis=1)
    fractions = counts / values.size
    return DVHCurve(
        structure=mask.name,
        bin_width_gy=bin_width_gy,
        thresholds_gy=thresholds,
        fractions=fractions.astype(float),
    )


def coverage(dose: DoseDistribution, ptv: StructureMask, prescription_gy: float) -> float:
    """Percent of PTV voxels receiving at least the prescription."""
    values = dose.dose[ptv.mask]
    if values.size == 0:
        raise EmptyStructureError("PTV has no voxels")
    return 100.0 * float(np.count_nonzero(values >= prescription_gy)) / values.size


def dmax(dose: DoseDistribution, mask: StructureMask | None = None) -> float:
    """Maximum dose, global when no mask is given."""
    if mask is None:
        return float(dose.dose.max())
    values = dose.dose[mask.mask]
    if values.size == 0:
        raise EmptyStructureError(f"structure {mask.name!r} has no voxels")
    return float(values.max())


def conformity_index(dose: DoseDistribution, ptv: StructureMask, prescription_gy: float) -> float:
    """Paddick CI = (TV_PIV)^2 / (TV * PIV); 0 when nothing reaches prescription."""
    if ptv.voxel_count == 0:
        raise EmptyStructureError("PTV has no voxels")
    piv = int(np.count_nonzero(dose.dose >= prescription_gy))
    if piv == 0:
        return 0.0
    tv = ptv.voxel_count
    tv_piv = int(np.count_nonzero(dose.dose[ptv.mask] >= prescription_gy))
    return (tv_piv * tv_piv) / (tv * piv)


def rtog_ratio(dose: DoseDistribution, ptv: StructureMask, prescription_gy: float) -> float:
    """PIV / TV, the classic prescription-isodose-to-target volume ratio."""
    if ptv.voxel_count == 0:
        raise EmptyStructureError("PTV has no voxels")
    piv = int(np.count_nonzero(dose.dose >= prescription_gy))
    return piv / ptv.voxel_count


def gradient_index(dose: DoseDistribution, prescription_gy: float) -> float:
    """GI = V(>= 50% rx) / V(>= rx); undefined when nothing reaches rx."""
    v100 = int(np.count_nonzero(dose.dose >= prescription_gy))
    if v100 == 0:
        raise UndefinedMetricError("gradient index undefined: no voxel reaches the prescription")
    v50 = int(np.count_nonzero(dose.dose >= 0.5 * prescription_gy))
    return v50 / v100


def v12_normal_brain(dose: DoseDistribution, brain: StructureMask, gtv: StructureMask | None) -> float:
    """Volume (cc) of Brain-minus-GTV receiving at least 12 Gy."""
    if brain.voxel_count == 0:
        raise EmptyStructureError("Brain has no voxels")
    normal = subtract_masks(brain, gtv) if gtv is not None else brain
    voxels = int(np.count_nonzero(dose.dose[normal.mask] >= 12.0))
    return voxels * dose.grid.voxel_volume_cc


# ---------------------------------------------------------------------------
# Combined report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    coverage_pct: float
    dmax_gy: float
    ci: float
    gi: float | None  # None when no voxel reaches prescription
    v12_cc: float
    oar_dmax_gy: dict[str, float] = field(default_factory=dict)  # role value -> Gy, 7 OARs
    rtog: float = 0.0

    def to_flat_dict(self) -> dict[str, float | None]:
        flat: dict[str, float | None] = {
            "coverage": self.coverage_pct,
            "dmax": self.dmax_gy,
            "ci": self.ci,
            "gi": self.gi,
            "v12": self.v12_cc,
            "rtog_ratio": self.rtog,
        }
        for role, metric in _ROLE_METRIC.items():
            flat[metric] = self.oar_dmax_gy.get(role.value)
        flat["dmax_normal_brain"] = self.oar_dmax_gy.get("NormalBrain")
        return flat

    def to_json(self) -> str:
        return json.dumps(self.to_flat_dict(), sort_keys=True)

    @classmethod
    def from_flat_dict(cls, flat: dict) -> "MetricsReport":
        oar = {}
        for role, metric in _ROLE_METRIC.items():
            if flat.get(metric) is not None:
                oar[role.value] = float(flat[metric])
        if flat.get("dmax_normal_brain") is not None:
            oar["NormalBrain"] = float(flat["dmax_normal_brain"])
        return cls(
            coverage_pct=float(flat["coverage"]),
            dmax_gy=float(flat["dmax"]),
            ci=float(flat["ci"]),
            gi=None if flat.get("gi") is None else float(flat["gi"]),
            v12_cc=float(flat["v12"]),
            oar_dmax_gy=oar,
            rtog=float(flat.get("rtog_ratio", 0.0)),
        )


def compute_metrics(dose: DoseDistribution, case: Case) -> MetricsReport:
    ptv = case.ptv
    brain = case.brain
    gtv = case.gtv
    rx = case.prescription_gy

    try:
        gi = gradient_index(dose, rx)
    except UndefinedMetricError:
        gi = None

    oar: dict[str, float] = {}
    for role in _ROLE_METRIC:
        s = case.find_role(role)
        if s is not None and s.voxel_count > 0:
            oar[role.value] = dmax(dose, s)
    normal = subtract_masks(brain, gtv) if gtv is not None else brain
    if normal.voxel_count > 0:
        oar["NormalBrain"] = float(dose.dose[normal.mask].max())

    return MetricsReport(
        coverage_pct=coverage(dose, ptv, rx),
        dmax_gy=dmax(dose),
        ci=conformity_index(dose, ptv, rx),
        gi=gi,
        v12_cc=v12_normal_brain(dose, brain, gtv),
        oar_dmax_gy=oar,
        rtog=rtog_ratio(dose, ptv, rx),
    )


# ---------------------------------------------------------------------------
# Clinical goals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Goal:
    metric: str
    comparator: str  # ">" or "<", strict
    threshold: float
    units: str

    def __post_init__(self):
        if self.comparator not in (">", "<"):
            raise InvalidGoalSetError(f"comparator must be '>' or '<', got {self.comparator!r}")
        if self.threshold <= 0:
            raise InvalidGoalSetError(f"goal threshold must be positive, got {self.threshold}")


@dataclass(frozen=True)
class GoalSet:
    goals: tuple[Goal, ...]

    def __post_init__(self):
        object.__setattr__(self, "goals", tuple(self.goals))

    def __iter__(self):
        return iter(self.goals)

    def __len__(self):
        return len(self.goals)


@dataclass(frozen=True)
class GoalCheck:
    goal: Goal
    value: float | None
    passed: bool


@dataclass(frozen=True)
class GoalReport:
    checks: tuple[GoalCheck, ...]
    overall_pass: bool

    def passed_count(self) -> int:
        return sum(1 for c in self.checks if c.passed)


def default_goals(
    prescription_gy: float = 18.0,
    brainstem_dmax_gy: float = 12.0,
    chiasm_dmax_gy: float = 9.0,
    lateral_dmax_gy: float = 9.0,
    v12_cc: float = 10.0,
    hotspot_fraction: float = 1.2,
) -> GoalSet:
    """Single-fraction goal set. Coverage and the hot-spot cap scale with the
    prescription; brainstem and chiasm limits are institutional settings, so
    they stay arguments rather than constants."""
    return GoalSet(
        (
            Goal("coverage", ">", 95.0, "%"),
            Goal("dmax", "<", hotspot_fraction * prescription_gy, "Gy"),
            Goal("v12", "<", v12_cc, "cc"),
            Goal("dmax_brainstem", "<", brainstem_dmax_gy, "Gy"),
            Goal("dmax_optic_chiasm", "<", chiasm_dmax_gy, "Gy"),
            Goal("dmax_optic_nerve_l", "<", lateral_dmax_gy, "Gy"),
            Goal("dmax_optic_nerve_r", "<", lateral_dmax_gy, "Gy"),
            Goal("dmax_cochlea_l", "<", lateral_dmax_gy, "Gy"),
            Goal("dmax_cochlea_r", "<", lateral_dmax_gy, "Gy"),
        )
    )


def goals_to_dicts(goals: GoalSet) -> list[dict]:
    return [
        {"metric": g.metric, "comparator": g.comparator, "threshold": g.threshold, "units": g.units}
        for g in goals
    ]


def goals_from_dicts(rows: Iterable[dict]) -> GoalSet:
    return GoalSet(tuple(Goal(r["metric"], r["comparator"], float(r["threshold"]), r["units"]) for r in rows))


def check_goals(report: MetricsReport, goals: GoalSet) -> GoalReport:
    """Evaluate every goal with strict comparators; overall pass iff all pass.
    A goal on an unavailable value (e.g. GI when undefined) fails."""
    flat = report.to_flat_dict()
    checks = []
    for g in goals:
        if g.metric not in flat:
            raise InvalidGoalSetError(f"goal metric {g.metric!r} does not name a report field")
        value = flat[g.metric]
        if value is None:
            passed = False
        elif g.comparator == ">":
            passed = value > g.threshold
        else:
            passed = value < g.threshold
        checks.append(GoalCheck(goal=g, value=value, passed=passed))
    return GoalReport(checks=tuple(checks), overall_pass=all(c.passed for c in checks))


def goal_deficiency(report: MetricsReport, goals: GoalSet) -> float:
    """Sum of normalized goal violations, max(0, violation / threshold).
    Zero iff every goal passes (up to strictness at the boundary)."""
    flat = report.to_flat_dict()
    total = 0.0
    for g in goals:
        value = flat.get(g.metric)
        if value is None:
            total += 1.0  # undefined metric counts as a full violation
        elif g.comparator == ">":
            total += max(0.0, (g.threshold - value) / g.threshold)
        else:
            total += max(0.0, (value - g.threshold) / g.threshold)
    return total


# ---------------------------------------------------------------------------
# CSV emission for the stats harness
# ---------------------------------------------------------------------------

METRICS_CSV_HEADER = ("patient", "variant", "metric", "value")


def write_metrics_csv(path: str | Path, rows: Iterable[tuple[str, str, MetricsReport]]) -> Path:
    """One row per (patient, variant, metric). GI rows are skipped when the
    index is undefined; downstream pairing treats that as a missing value."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_HEADER)
        for patient, variant, report in rows:
            flat = report.to_flat_dict()
            for metric in PRIMARY_METRICS + SECONDARY_METRICS:
                value = flat.get(metric)
                if value is None:
                    continue
                writer.writerow([patient, variant, metric, f"{value:.10g}"])
    return path


def read_metrics_csv(path: str | Path) -> dict[str, dict[str, float]]:
    """metric -> {patient -> value}. Variant column is carried in the file
    name by convention; rows keep whatever single variant the file holds."""
    table: dict[str, dict[str, float]] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(METRICS_CSV_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"metrics CSV missing columns: {sorted(missing)}")
        for row in reader:
            table.setdefault(row["metric"], {})[row["patient"]] = float(row["value"])
    return table
