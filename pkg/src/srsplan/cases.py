"""Voxel grids, anatomical structures, and synthetic case generation.

Structures are boolean voxel masks on a shared grid; a voxel belongs to a
sphere/ellipsoid when its center lies inside. Cases serialize to JSON with
per-slice run-length encoded masks so they stay diff- and git-friendly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import GeometryError, InvalidCaseError, InvalidSpecError

CASE_FORMAT = "srsplan-case/1"


class StructureRole(str, Enum):
    PTV = "PTV"
    GTV = "GTV"
    BRAIN = "Brain"
    BRAINSTEM = "Brainstem"
    OPTIC_CHIASM = "OpticChiasm"
    OPTIC_NERVE_L = "OpticNerveL"
    OPTIC_NERVE_R = "OpticNerveR"
    COCHLEA_L = "CochleaL"
    COCHLEA_R = "CochleaR"
    RING = "Ring"


#: The discrete organs at risk every synthetic case carries. Together with
#: normal brain (Brain minus GTV) they form the seven-structure OAR family.
OAR_ROLES = (
    StructureRole.BRAINSTEM,
    StructureRole.OPTIC_CHIASM,
    StructureRole.OPTIC_NERVE_L,
    StructureRole.OPTIC_NERVE_R,
    StructureRole.COCHLEA_L,
    StructureRole.COCHLEA_R,
)


@dataclass(frozen=True)
class VoxelGrid:
    """Regular grid; voxel (i,j,k) has its center at origin + (i+0.5)*spacing."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise InvalidSpecError(f"grid dims must be three integers >= 1, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise InvalidSpecError(f"grid spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def voxel_volume_cc(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz / 1000.0

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        return tuple(d * s for d, s in zip(self.dims, self.spacing))

    def axis_centers(self, axis: int) -> np.ndarray:
        n = self.dims[axis]
        return self.origin[axis] + (np.arange(n) + 0.5) * self.spacing[axis]

    def center_mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Voxel-center coordinates as three broadcastable (nx,ny,nz) arrays."""
        xs, ys, zs = (self.axis_centers(a) for a in range(3))
        return np.meshgrid(xs, ys, zs, indexing="ij")

    def contains_point(self, p: Sequence[float]) -> bool:
        lo = np.asarray(self.origin)
        hi = lo + np.asarray(self.extent_mm)
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= lo) and np.all(p <= hi))


@dataclass(eq=False)
class StructureMask:
    """Named boolean voxel mask with a clinical role."""

    name: str
    role: StructureRole
    mask: np.ndarray

    def __post_init__(self):
        self.role = StructureRole(self.role)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 3:
            raise GeometryError(f"mask for {self.name!r} must be 3-D, got {self.mask.ndim}-D")

    @property
    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.mask))

    def indices(self) -> np.ndarray:
        return np.argwhere(self.mask)

    def same_voxels(self, other: "StructureMask") -> bool:
        return self.mask.shape == other.mask.shape and bool(np.array_equal(self.mask, other.mask))


@dataclass(frozen=True)
class BeamSpec:
    """Fixed beam geometry: direction of travel, isocenter, and aperture radius."""

    direction: tuple[float, float, float]
    isocenter: tuple[float, float, float]
    aperture_radius_mm: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if abs(float(np.linalg.norm(d)) - 1.0) > 1e-9:
            raise InvalidSpecError(f"beam direction must be a unit vector, |d|={np.linalg.norm(d)}")
        if self.aperture_radius_mm <= 0:
            raise InvalidSpecError("aperture radius must be positive")
        object.__setattr__(self, "direction", tuple(float(x) for x in d))
        object.__setattr__(self, "isocenter", tuple(float(x) for x in self.isocenter))
        object.__setattr__(self, "aperture_radius_mm", float(self.aperture_radius_mm))


@dataclass
class Case:
    """A planning problem instance: grid, structures, prescription, fixed beams."""

    id: str
    grid: VoxelGrid
    structures: list[StructureMask]
    prescription_gy: float = 18.0
    beams: list[BeamSpec] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.prescription_gy <= 0:
            raise InvalidCaseError("prescription must be positive")
        for s in self.structures:
            if s.mask.shape != self.grid.shape:
                raise GeometryError(f"structure {s.name!r} mask shape {s.mask.shape} != grid {self.grid.shape}")
        ptvs = [s for s in self.structures if s.role == StructureRole.PTV]
        brains = [s for s in self.structures if s.role == StructureRole.BRAIN]
        if len(ptvs) != 1:
            raise InvalidCaseError(f"case must have exactly one PTV, found {len(ptvs)}")
        if len(brains) != 1:
            raise InvalidCaseError(f"case must have exactly one Brain, found {len(brains)}")
        if ptvs[0].voxel_count == 0:
            raise InvalidCaseError("PTV mask is empty")
        gtv = self.find_role(StructureRole.GTV)
        if gtv is not None and np.any(gtv.mask & ~brains[0].mask):
            raise InvalidCaseError("Brain must contain the GTV")

    def structure(self, name: str) -> StructureMask:
        for s in self.structures:
            if s.name == name:
                return s
        raise KeyError(f"no structure named {name!r} in case {self.id}")

    def structure_names(self) -> list[str]:
        return [s.name for s in self.structures]

    def find_role(self, role: StructureRole) -> StructureMask | None:
        for s in self.structures:
            if s.role == role:
                return s
        return None

    @property
    def ptv(self) -> StructureMask:
        return self.find_role(StructureRole.PTV)

    @property
    def brain(self) -> StructureMask:
        return self.find_role(StructureRole.BRAIN)

    @property
    def gtv(self) -> StructureMask | None:
        return self.find_role(StructureRole.GTV)

    def with_structure(self, mask: StructureMask) -> "Case":
        """Copy of the case with one structure added (replacing a same-name one)."""
        kept = [s for s in self.structures if s.name != mask.name]
        return Case(
            id=self.id,
            grid=self.grid,
            structures=kept + [mask],
            prescription_gy=self.prescription_gy,
            beams=list(self.beams),
        )


# ---------------------------------------------------------------------------
# Mask operations
# ---------------------------------------------------------------------------

def structure_volume(mask: StructureMask, grid: VoxelGrid) -> float:
    """Structure volume in cc: voxel count times voxel volume."""
    if mask.mask.shape != grid.shape:
        raise GeometryError(f"mask shape {mask.mask.shape} does not match grid {grid.shape}")
    return mask.voxel_count * grid.voxel_volume_cc


def subtract_masks(a: StructureMask, b: StructureMask) -> StructureMask:
    """Set difference a \\ b (used to build normal brain = Brain minus GTV)."""
    if a.mask.shape != b.mask.shape:
        raise GeometryError(f"mask shapes differ: {a.mask.shape} vs {b.mask.shape}")
    return StructureMask(name=f"{a.name}-{b.name}", role=a.role, mask=a.mask & ~b.mask)


def ellipsoid_mask(grid: VoxelGrid, center: Sequence[float], radii: float | Sequence[float]) -> np.ndarray:
    """Boolean mask of voxels whose center lies inside the ellipsoid."""
    r = np.broadcast_to(np.asarray(radii, dtype=float), (3,))
    if np.any(r <= 0):
        raise InvalidSpecError(f"radii must be positive, got {radii}")
    x, y, z = grid.center_mesh()
    c = np.asarray(center, dtype=float)
    q = ((x - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((z - c[2]) / r[2]) ** 2
    return q <= 1.0


# ---------------------------------------------------------------------------
# Synthetic case specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeSpec:
    """Sphere (scalar radius) or axis-aligned ellipsoid (radius triple), in mm."""

    center: tuple[float, float, float]
    radius: float | tuple[float, float, float]

    def radii(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.radius, dtype=float), (3,)).copy()

    def max_radius(self) -> float:
        return float(self.radii().max())


@dataclass(frozen=True)
class CaseSpec:
    """Everything needed to build one synthetic case deterministically."""

    id: str
    grid: VoxelGrid
    brain: ShapeSpec
    ptv: ShapeSpec
    gtv_radius_mm: float
    oars: dict[StructureRole, ShapeSpec]
    beam_count: int = 9
    beam_seed: int = 0
    aperture_scale: float = 4.2
    prescription_gy: float = 18.0


def _fibonacci_directions(n: int) -> np.ndarray:
    """n quasi-uniform unit vectors on the sphere (golden-angle spiral)."""
    i = np.arange(n, dtype=float)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    z = 1.0 - 2.0 * (i + 0.5) / n
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, 1.0))
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix via QR of a Gaussian matrix."""
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def arrange_beams(
    isocenter: Sequence[float],
    count: int,
    seed: int,
    aperture_radius_mm: float,
) -> list[BeamSpec]:
    """Fixed synthetic beam geometry: seeded quasi-uniform directions aimed at
    the isocenter. Stands in for the clinical beam configuration, which is
    unavailable for synthetic anatomy."""
    if count < 1:
        raise InvalidSpecError("beam count must be >= 1")
    rng = np.random.default_rng(seed)
    rot = _random_rotation(rng)
    dirs = _fibonacci_directions(count) @ rot.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    iso = tuple(float(v) for v in isocenter)
    return [BeamSpec(direction=tuple(d), isocenter=iso, aperture_radius_mm=aperture_radius_mm) for d in dirs]


def generate_synthetic_case(spec: CaseSpec) -> Case:
    """Voxelize the spec into a Case. Pure function of the spec (beam seed included)."""
    for label, shape in [("brain", spec.brain), ("ptv", spec.ptv)] + [
        (role.value, s) for role, s in spec.oars.items()
    ]:
        if np.any(shape.radii() <= 0):
            raise InvalidSpecError(f"{label} radius must be positive")
    if spec.gtv_radius_mm <= 0:
        raise InvalidSpecError("gtv radius must be positive")

    grid = spec.grid
    ptv_c = np.asarray(spec.ptv.center, dtype=float)
    ptv_r = spec.ptv.max_radius()
    lo = np.asarray(grid.origin)
    hi = lo + np.asarray(grid.extent_mm)
    if np.any(ptv_c - ptv_r < lo) or np.any(ptv_c + ptv_r > hi):
        raise GeometryError("PTV sphere extends outside the grid")

    brain_c = np.asarray(spec.brain.center, dtype=float)
    brain_r = spec.brain.radii()
    # Conservative containment check for (possibly) ellipsoidal brain.
    if float(np.linalg.norm(ptv_c - brain_c)) + ptv_r > float(brain_r.min()):
        raise InvalidSpecError("PTV must lie fully inside the Brain")

    structures = [
        StructureMask("Brain", StructureRole.BRAIN, ellipsoid_mask(grid, spec.brain.center, spec.brain.radius)),
        StructureMask("GTV", StructureRole.GTV, ellipsoid_mask(grid, spec.ptv.center, spec.gtv_radius_mm)),
        StructureMask("PTV", StructureRole.PTV, ellipsoid_mask(grid, spec.ptv.center, spec.ptv.radius)),
    ]
    for role in OAR_ROLES:
        shape = spec.oars.get(role)
        if shape is None:
            raise InvalidSpecError(f"case spec is missing OAR {role.value}")
        structures.append(StructureMask(role.value, role, ellipsoid_mask(grid, shape.center, shape.radius)))

    aperture = spec.aperture_scale * ptv_r
    beams = arrange_beams(spec.ptv.center, spec.beam_count, spec.beam_seed, aperture)
    return Case(
        id=spec.id,
        grid=grid,
        structures=structures,
        prescription_gy=spec.prescription_gy,
        beams=beams,
    )


# ---------------------------------------------------------------------------
# Cohorts
# ---------------------------------------------------------------------------

#: Anatomically inspired OAR layout, offsets in mm from the brain center
#: (x lateral, y anterior, z superior).
DEFAULT_OAR_LAYOUT: dict[StructureRole, ShapeSpec] = {
    StructureRole.BRAINSTEM: ShapeSpec(center=(0.0, -18.0, -24.0), radius=(8.0, 8.0, 16.0)),
    StructureRole.OPTIC_CHIASM: ShapeSpec(center=(0.0, 12.0, -10.0), radius=4.0),
    StructureRole.OPTIC_NERVE_L: ShapeSpec(center=(-11.0, 20.0, -10.0), radius=(3.0, 8.0, 3.0)),
    StructureRole.OPTIC_NERVE_R: ShapeSpec(center=(11.0, 20.0, -10.0), radius=(3.0, 8.0, 3.0)),
    StructureRole.COCHLEA_L: ShapeSpec(center=(-28.0, -12.0, -18.0), radius=3.0),
    StructureRole.COCHLEA_R: ShapeSpec(center=(28.0, -12.0, -18.0), radius=3.0),
}


@dataclass(frozen=True)
class CohortSpec:
    """Sampling ranges for a synthetic single-target cohort.

    The real cohort's target size/location distribution is not published, so
    these ranges are an artifact choice, not a reproduction."""

    grid_dims: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: float = 2.5
    brain_radius_mm: float = 52.0
    ptv_radius_range_mm: tuple[float, float] = (4.0, 6.5)
    ptv_offset_range_mm: tuple[float, float] = (4.0, 26.0)
    gtv_margin_mm: float = 2.0
    oar_clearance_mm: float = 6.0
    beam_count: int = 9
    # Aperture ~4x the PTV radius keeps the composite profile flat enough
    # across the target that coverage and the 120% hot-spot cap can both hold.
    aperture_scale: float = 4.2
    prescription_gy: float = 18.0

    def grid(self) -> VoxelGrid:
        spacing = (self.spacing_mm,) * 3
        extent = np.asarray(self.grid_dims) * self.spacing_mm
        origin = tuple(-extent / 2.0)
        return VoxelGrid(dims=self.grid_dims, spacing=spacing, origin=origin)


def sample_case_spec(cohort: CohortSpec, case_id: str, seed: int) -> CaseSpec:
    """Draw one case spec. Rejection-samples the PTV position until it clears
    every OAR, so the default goals stay geometrically achievable."""
    rng = np.random.default_rng(seed)
    r_lo, r_hi = cohort.ptv_radius_range_mm
    for _ in range(1000):
        ptv_r = float(rng.uniform(r_lo, r_hi))
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        off_lo, off_hi = cohort.ptv_offset_range_mm
        offset = float(rng.uniform(off_lo, min(off_hi, cohort.brain_radius_mm - ptv_r - 3.0)))
        center = tuple(direction * offset)
        clear = True
        for shape in DEFAULT_OAR_LAYOUT.values():
            gap = float(np.linalg.norm(np.asarray(center) - np.asarray(shape.center)))
            if gap < ptv_r + shape.max_radius() + cohort.oar_clearance_mm:
                clear = False
                break
        if clear:
            break
    else:
        raise InvalidSpecError("could not place PTV clear of all OARs")

    return CaseSpec(
        id=case_id,
        grid=cohort.grid(),
        brain=ShapeSpec(center=(0.0, 0.0, 0.0), radius=cohort.brain_radius_mm),
        ptv=ShapeSpec(center=center, radius=ptv_r),
        gtv_radius_mm=max(1.0, ptv_r - cohort.gtv_margin_mm),
        oars=dict(DEFAULT_OAR_LAYOUT),
        beam_count=cohort.beam_count,
        beam_seed=int(rng.integers(0, 2**31 - 1)),
        aperture_scale=cohort.aperture_scale,
        prescription_gy=cohort.prescription_gy,
    )


def sample_cohort(cohort: CohortSpec, count: int, seed: int) -> list[Case]:
    """Generate `count` synthetic cases; case i uses sub-seed seed+i."""
    return [
        generate_synthetic_case(sample_case_spec(cohort, f"case-{seed}-{i:03d}", seed + i))
        for i in range(count)
    ]


# ---------------------------------------------------------------------------
# JSON serialization (RLE per z-slice)
# ---------------------------------------------------------------------------

def _rle_encode_slice(plane: np.ndarray) -> list[list[int]]:
    flat = plane.ravel(order="C").astype(np.int8)
    padded = np.concatenate([[0], flat, [0]])
    changes = np.flatnonzero(np.diff(padded))
    starts, ends = changes[::2], changes[1::2]
    return [[int(s), int(e - s)] for s, e in zip(starts, ends)]


def _rle_decode_slice(runs: Iterable[Sequence[int]], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    for start, length in runs:
        if start < 0 or start + length > flat.size:
            raise GeometryError(f"RLE run [{start},{length}] outside slice of {flat.size} voxels")
        flat[start : start + length] = True
    return flat.reshape(shape)


def mask_to_rle(mask: np.ndarray) -> list[list]:
    """Per-z-slice run-length encoding: [[z, [[start, len], ...]], ...]."""
    slices = []
    for z in range(mask.shape[2]):
        runs = _rle_encode_slice(mask[:, :, z])
        if runs:
            slices.append([z, runs])
    return slices


def mask_from_rle(slices: Iterable[Sequence], dims: tuple[int, int, int]) -> np.ndarray:
    mask = np.zeros(dims, dtype=bool)
    for z, runs in slices:
        if not 0 <= z < dims[2]:
            raise GeometryError(f"RLE slice index {z} outside grid of {dims[2]} slices")
        mask[:, :, z] = _rle_decode_slice(runs, (dims[0], dims[1]))
    return mask


def case_to_dict(case: Case) -> dict:
    return {
        "format": CASE_FORMAT,
        "id": case.id,
        "grid": {
            "dims": list(case.grid.dims),
            "spacing_mm": list(case.grid.spacing),
            "origin_mm": list(case.grid.origin),
        },
        "prescription_gy": case.prescription_gy,
        "structures": [
            {"name": s.name, "role": s.role.value, "rle": mask_to_rle(s.mask)} for s in case.structures
        ],
        "beams": [
            {
                "direction": list(b.direction),
                "isocenter_mm": list(b.isocenter),
                "aperture_radius_mm": b.aperture_radius_mm,
            }
            for b in case.beams
        ],
    }


def case_from_dict(doc: dict) -> Case:
    if doc.get("format") != CASE_FORMAT:
        raise InvalidSpecError(f"unsupported case format {doc.get('format')!r}")
    g = doc["grid"]
    grid = VoxelGrid(dims=tuple(g["dims"]), spacing=tuple(g["spacing_mm"]), origin=tuple(g["origin_mm"]))
    structures = [
        StructureMask(s["name"], StructureRole(s["role"]), mask_from_rle(s["rle"], grid.dims))
        for s in doc["structures"]
    ]
    beams = [
        BeamSpec(
            direction=tuple(b["direction"]),
            isocenter=tuple(b["isocenter_mm"]),
            aperture_radius_mm=b["aperture_radius_mm"],
        )
        for b in doc["beams"]
    ]
    return Case(
        id=doc["id"],
        grid=grid,
        structures=structures,
        prescription_gy=doc["prescription_gy"],
        beams=beams,
    )


def save_case(case: Case, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(case_to_dict(case), indent=1, sort_keys=True))
    return path


def load_case(path: str | Path) -> Case:
    return case_from_dict(json.loads(Path(path).read_text()))
