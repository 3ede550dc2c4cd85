"""Prompt construction for planning policies.

Prompts are plain text with human-readable sections (scenario, goals, latest
metrics, memory digest, output schema). The same facts also appear in one
fenced machine-readable JSON block so a deterministic scripted policy can act
on them without natural-language parsing; a remote model may use either.
"""

from __future__ import annotations

import json
import re

import numpy as np

from .cases import Case, StructureRole, structure_volume
from .errors import ProtocolError
from .metrics import GoalReport, GoalSet, MetricsReport, goals_to_dicts

STATE_OPEN = "```state"
STATE_CLOSE = "```"
_STATE_RE = re.compile(r"```state\s*\n(.*?)\n```", re.DOTALL)

#: Fixed round-2 instruction, applied verbatim to every case.
STANDARD_REFINEMENT_TEXT = (
    "Improve the conformity of this plan while maintaining target coverage "
    "and all organ-at-risk constraints."
)

OUTPUT_INSTRUCTIONS = """\
Respond with your reasoning first, then exactly one fenced JSON block:
```json
[{"structure": "PTV", "kind": "lower", "dose_gy": 18.4, "volume_pct": 99.0, "priority": 80}]
```
Each array element must carry exactly the fields structure, kind ("upper" or
"lower"), dose_gy, volume_pct (0-100), and priority (integer 0-100). Use only
the structure names listed above. The array replaces the full objective set."""


def case_scenario(case: Case) -> dict:
    """Compact anatomical summary: volumes, PTV size/location, and the
    center-to-center distance from the PTV to each organ at risk."""
    grid = case.grid
    ptv = case.ptv
    ptv_idx = np.argwhere(ptv.mask)
    centroid = np.asarray(grid.origin) + (ptv_idx.mean(axis=0) + 0.5) * np.asarray(grid.spacing)
    ptv_cc = structure_volume(ptv, grid)
    eq_radius = (3.0 * ptv_cc * 1000.0 / (4.0 * np.pi)) ** (1.0 / 3.0)

    structures = []
    for s in case.structures:
        entry = {"name": s.name, "role": s.role.value, "volume_cc": round(structure_volume(s, grid), 3)}
        if s.role not in (StructureRole.PTV, StructureRole.GTV, StructureRole.BRAIN) and s.voxel_count:
            idx = np.argwhere(s.mask)
            c = np.asarray(grid.origin) + (idx.mean(axis=0) + 0.5) * np.asarray(grid.spacing)
            entry["distance_to_ptv_mm"] = round(float(np.linalg.norm(c - centroid)), 1)
        structures.append(entry)

    return {
        "case_id": case.id,
        "prescription_gy": case.prescription_gy,
        "beam_count": len(case.beams),
        "ptv_volume_cc": round(float(ptv_cc), 3),
        "ptv_equivalent_radius_mm": round(float(eq_radius), 2),
        "ptv_centroid_mm": [round(float(v), 1) for v in centroid],
        "structures": structures,
    }


def _memory_digest(memory: list[tuple[list[dict], dict]], k: int = 5) -> list[dict]:
    """Last k (objectives, metrics) pairs plus the best-coverage one so far."""
    if not memory:
        return []
    digest = []
    seen = set()
    start = max(0, len(memory) - k)
    for i in range(start, len(memory)):
        objectives, flat = memory[i]
        digest.append({"iteration": i + 1, "objectives": objectives, "metrics": flat})
        seen.add(i)
    best = max(range(len(memory)), key=lambda i: (memory[i][1].get("coverage") or 0.0, -i))
    if best not in seen:
        digest.insert(0, {"iteration": best + 1, "objectives": memory[best][0], "metrics": memory[best][1], "best": True})
    return digest


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    return f"{value:.2f}"


def _goal_table(goals: GoalSet, check: GoalReport | None) -> str:
    lines = ["| metric | goal | value | status |", "| --- | --- | --- | --- |"]
    by_metric = {c.goal.metric: c for c in check.checks} if check else {}
    for g in goals:
        c = by_metric.get(g.metric)
        value = _fmt(c.value) if c else "n/a"
        status = ("pass" if c.passed else "FAIL") if c else "-"
        lines.append(f"| {g.metric} | {g.comparator} {g.threshold:g} {g.units} | {value} | {status} |")
    return "\n".join(lines)


def build_prompt(
    case: Case,
    goals: GoalSet,
    memory: list[tuple[list[dict], dict]],
    round_number: int,
    latest_metrics: MetricsReport | None = None,
    latest_check: GoalReport | None = None,
    refinement_text: str | None = None,
    memory_k: int = 5,
    iteration_number: int = 1,
) -> str:
    """Assemble the full policy prompt for one iteration."""
    if round_number >= 2 and not refinement_text:
        raise ProtocolError("refinement-round prompts require refinement text")

    scenario = case_scenario(case)
    digest = _memory_digest(memory, k=memory_k)
    state = {
        "scenario": scenario,
        "round": round_number,
        "iteration": iteration_number,
        "goals": goals_to_dicts(goals),
        "latest_metrics": latest_metrics.to_flat_dict() if latest_metrics else None,
        "goal_check": (
            [{"metric": c.goal.metric, "value": c.value, "passed": c.passed} for c in latest_check.checks]
            if latest_check
            else None
        ),
        "memory": digest,
        "allowed_structures": case.structure_names(),
    }
    if refinement_text:
        state["refinement_text"] = refinement_text

    parts = [
        "# Radiosurgery planning task",
        f"Single-target cranial case {case.id}: prescription {case.prescription_gy:g} Gy "
        f"in one fraction, {len(case.beams)} fixed beams.",
        f"PTV volume {scenario['ptv_volume_cc']} cc (equivalent radius "
        f"{scenario['ptv_equivalent_radius_mm']} mm) at {scenario['ptv_centroid_mm']} mm.",
        "",
        "## Structures",
    ]
    for s in scenario["structures"]:
        dist = f", {s['distance_to_ptv_mm']} mm from PTV" if "distance_to_ptv_mm" in s else ""
        parts.append(f"- {s['name']} ({s['role']}): {s['volume_cc']} cc{dist}")
    parts += ["", "## Clinical goals", _goal_table(goals, latest_check)]

    parts.append("")
    parts.append("## Current plan")
    if latest_metrics is None:
        parts.append("No plan computed yet; propose an initial objective set.")
    else:
        flat = latest_metrics.to_flat_dict()
        parts.append(
            f"coverage {_fmt(flat['coverage'])}%, Dmax {_fmt(flat['dmax'])} Gy, "
            f"CI {_fmt(flat['ci'])}, GI {_fmt(flat['gi'])}, V12Gy {_fmt(flat['v12'])} cc"
        )

    if digest:
        parts += ["", "## Prior iterations"]
        for entry in digest:
            tag = " (best so far)" if entry.get("best") else ""
            m = entry["metrics"]
            parts.append(
                f"- iteration {entry['iteration']}{tag}: coverage {_fmt(m.get('coverage'))}%, "
                f"Dmax {_fmt(m.get('dmax'))} Gy, CI {_fmt(m.get('ci'))}, V12Gy {_fmt(m.get('v12'))} cc; "
                f"objectives {json.dumps(entry['objectives'], sort_keys=True)}"
            )

    if round_number == 2:
        parts += ["", "## Reviewer feedback", refinement_text]

    parts += [
        "",
        "## Output format",
        OUTPUT_INSTRUCTIONS,
        "",
        STATE_OPEN,
        json.dumps(state, sort_keys=True),
        STATE_CLOSE,
    ]
    return "\n".join(parts)


def extract_state(prompt: str) -> dict:
    """Recover the machine-readable state block from a prompt."""
    m = _STATE_RE.search(prompt)
    if m is None:
        raise ProtocolError("prompt carries no state block")
    return json.loads(m.group(1))
