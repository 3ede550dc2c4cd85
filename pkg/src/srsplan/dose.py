"""Analytic beam dose engine.

Each beam deposits dose along a straight axis through the patient:

    dose(voxel) = D0 * exp(-MU * depth) * exp(-(r / sigma)^2)

where depth is measured along the beam axis from the point where the central
ray first enters the Brain mask, r is the off-axis distance, and
sigma = aperture_radius / 2. D0 is calibrated per case so that unit weights
on all beams sum to the prescription at the isocenter, which keeps default
cases solvable. This is a deliberately simple, differentiable stand-in for a
clinical dose engine; no scatter, heterogeneity, or delivery modeling.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cases import BeamSpec, Case, VoxelGrid
from .errors import GeometryError, InvalidCaseError, InvalidWeightsError

logger = logging.getLogger(__name__)

#: Linear attenuation coefficient, per mm.
MU_PER_MM = 0.004
#: Lateral Gaussian width as a fraction of the aperture radius.
SIGMA_APERTURE_FRACTION = 0.5
#: Per-beam influence entries below this fraction of the beam maximum are dropped.
PRUNE_FRACTION = 1e-3
#: Ray-march step as a fraction of the smallest voxel spacing.
RAY_STEP_FRACTION = 0.25

INFLUENCE_CACHE_VERSION = "srsplan-influence/1"


def engine_constants_hash() -> str:
    """Hash of the kernel constants; cache files keyed on it stay honest."""
    blob = json.dumps(
        {
            "version": INFLUENCE_CACHE_VERSION,
            "mu_per_mm": MU_PER_MM,
            "sigma_fraction": SIGMA_APERTURE_FRACTION,
            "prune_fraction": PRUNE_FRACTION,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def kernel_value(depth_mm: float, r_mm: float, aperture_radius_mm: float, d0: float = 1.0) -> float:
    """Closed-form single-beam kernel. Negative depth means the point lies
    upstream of the patient surface and receives nothing."""
    if depth_mm < 0:
        return 0.0
    sigma = SIGMA_APERTURE_FRACTION * aperture_radius_mm
    return float(d0 * np.exp(-MU_PER_MM * depth_mm) * np.exp(-((r_mm / sigma) ** 2)))


@dataclass
class DoseInfluence:
    """Per-beam dose per unit weight on the case grid, plus the shared D0."""

    case_id: str
    grid: VoxelGrid
    beams: list[BeamSpec]
    per_beam: np.ndarray  # (n_beams, nx, ny, nz), Gy per unit weight
    d0: float

    @property
    def beam_count(self) -> int:
        return len(self.beams)


@dataclass
class DoseDistribution:
    grid: VoxelGrid
    dose: np.ndarray  # (nx, ny, nz), Gy

    def __post_init__(self):
        if self.dose.shape != self.grid.shape:
            raise GeometryError(f"dose shape {self.dose.shape} != grid {self.grid.shape}")


def _entry_axial_offset(beam: BeamSpec, grid: VoxelGrid, brain: np.ndarray) -> float:
    """Axial coordinate (relative to the isocenter, along the beam direction)
    where the central ray first enters the Brain mask."""
    d = np.asarray(beam.direction)
    iso = np.asarray(beam.isocenter)
    # March the central ray across the whole grid extent.
    half_span = float(np.linalg.norm(grid.extent_mm)) + float(np.linalg.norm(iso - np.asarray(grid.origin)))
    step = RAY_STEP_FRACTION * min(grid.spacing)
    ts = np.arange(-half_span, half_span + step, step)
    pts = iso[None, :] + ts[:, None] * d[None, :]
    idx = np.floor((pts - np.asarray(grid.origin)) / np.asarray(grid.spacing)).astype(int)
    in_grid = np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=1)
    inside = np.zeros(ts.size, dtype=bool)
    ig = idx[in_grid]
    inside[in_grid] = brain[ig[:, 0], ig[:, 1], ig[:, 2]]
    hits = np.flatnonzero(inside)
    if hits.size == 0:
        raise GeometryError("beam central ray does not intersect the Brain")
    # Entry sits between the last outside sample and the first inside one.
    return float(ts[hits[0]] - 0.5 * step)


def _beam_raw_kernel(beam: BeamSpec, grid: VoxelGrid, brain: np.ndarray) -> tuple[np.ndarray, float]:
    """Unit-D0 kernel over all grid voxels, and the raw on-axis value at the
    beam's own isocenter (needed for calibration)."""
    d = np.asarray(beam.direction)
    iso = np.asarray(beam.isocenter)
    t_entry = _entry_axial_offset(beam, grid, brain)

    x, y, z = grid.center_mesh()
    px = x - iso[0]
    py = y - iso[1]
    pz = z - iso[2]
    t = px * d[0] + py * d[1] + pz * d[2]
    r2 = (px * px + py * py + pz * pz) - t * t
    np.clip(r2, 0.0, None, out=r2)

    depth = t - t_entry
    sigma = SIGMA_APERTURE_FRACTION * beam.aperture_radius_mm
    raw = np.exp(-MU_PER_MM * depth) * np.exp(-r2 / (sigma * sigma))
    raw[depth < 0] = 0.0

    iso_depth = -t_entry  # isocenter sits at t = 0
    iso_raw = float(np.exp(-MU_PER_MM * iso_depth)) if iso_depth >= 0 else 0.0
    return raw, iso_raw


def compute_influence(case: Case, workers: int | None = None) -> DoseInfluence:
    """Build the per-beam influence for a case. Pure function of the case:
    recomputation yields identical arrays. Beams are computed in parallel
    threads (numpy releases the GIL) and assembled in beam order."""
    if not case.beams:
        raise InvalidCaseError(f"case {case.id} has no beams")
    brain = case.brain.mask
    if not brain.any():
        raise InvalidCaseError(f"case {case.id} has an empty Brain mask")

    if workers is None:
        workers = min(8, len(case.beams))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda b: _beam_raw_kernel(b, case.grid, brain), case.beams))
    else:
        results = [_beam_raw_kernel(b, case.grid, brain) for b in case.beams]

    iso_total = sum(iso_raw for _, iso_raw in results)
    if iso_total <= 0:
        raise GeometryError(f"case {case.id}: no beam reaches its isocenter")
    d0 = case.prescription_gy / iso_total

    per_beam = np.empty((len(case.beams),) + case.grid.shape, dtype=np.float64)
    for b, (raw, _) in enumerate(results):
        beam_dose = d0 * raw
        cutoff = PRUNE_FRACTION * float(beam_dose.max())
        beam_dose[beam_dose < cutoff] = 0.0
        per_beam[b] = beam_dose

    logger.debug("influence for %s: %d beams, D0=%.4f Gy", case.id, len(case.beams), d0)
    return DoseInfluence(case_id=case.id, grid=case.grid, beams=list(case.beams), per_beam=per_beam, d0=d0)


def validate_weights(weights, beam_count: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size != beam_count:
        raise InvalidWeightsError(f"expected {beam_count} weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InvalidWeightsError("weights must be finite")
    if np.any(w < 0):
        raise InvalidWeightsError("weights must be nonnegative")
    return w


def compose_dose(influence: DoseInfluence, weights) -> DoseDistribution:
    """dose = sum_b weight_b * influence_b, voxelwise. Pure and reentrant."""
    w = validate_weights(weights, influence.beam_count)
    dose = np.tensordot(w, influence.per_beam, axes=1)
    return DoseDistribution(grid=influence.grid, dose=dose)


# ---------------------------------------------------------------------------
# Optional influence cache
# ---------------------------------------------------------------------------

def save_influence(influence: DoseInfluence, path: str | Path) -> Path:
    path = Path(path)
    header = json.dumps(
        {
            "version": INFLUENCE_CACHE_VERSION,
            "constants": engine_constants_hash(),
            "case_id": influence.case_id,
        }
    )
    np.savez_compressed(
        path,
        header=np.frombuffer(header.encode(), dtype=np.uint8),
        per_beam=influence.per_beam,
        d0=np.asarray([influence.d0]),
    )
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def load_influence(path: str | Path, case: Case) -> DoseInfluence | None:
    """Load a cached influence if it matches this case and engine constants;
    returns None on any mismatch so callers fall back to recomputation."""
    path = Path(path)
    if not path.exists():
        return None
    try:
        with np.load(path) as data:
            header = json.loads(bytes(data["header"]).decode())
            if header.get("version") != INFLUENCE_CACHE_VERSION:
                return None
            if header.get("constants") != engine_constants_hash():
                return None
            if header.get("case_id") != case.id:
                return None
            per_beam = data["per_beam"]
            d0 = float(data["d0"][0])
    except (OSError, ValueError, KeyError):
        return None
    if per_beam.shape != (len(case.beams),) + case.grid.shape:
        return None
    return DoseInfluence(case_id=case.id, grid=case.grid, beams=list(case.beams), per_beam=per_beam, d0=d0)
