"""Deterministic synthetic bi-ventricular cohorts with planted regional motion.

Each chamber is a closed ellipsoidal surface (LV prolate, RV flattened and
placed beside the septal wall). The surface is split into planted regions by
long-axis band and azimuthal sector; every region contracts along a blend of
its own inward direction and the local radial direction with its own
amplitude and timing. Phenotype programs scale the geometry and the regional
amplitudes/timings.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .container import save_cohort
from .mesh import (
    PHENOTYPES,
    Chamber,
    MeshSequence,
    MeshTopology,
    RegionPartition,
    chamber_volume,
    uv_ellipsoid,
)
from .partition import build_region_adjacency

N_FRAMES = 25

LV_RADIUS = 27.0  # mm, short-axis semi-axis of the NOR template
LV_ELONGATION = 1.6
RV_AXES = (18.0, 30.0, 38.0)
CHAMBER_GAP = 4.0

BASE_AMPLITUDE = {Chamber.LV: 0.3, Chamber.RV: 0.26}
# per-band multipliers (base -> apex) and per-band phase offsets (fraction of cycle)
BAND_AMPLITUDE = (0.7, 1.25, 0.85, 1.45, 1.0, 1.15)
BAND_PHASE = (0.0, 0.06, 0.02, 0.08, 0.04, 0.0)
SEPTAL_AMPLITUDE = 0.6
SEPTAL_PHASE = 0.03


@dataclass
class PhenotypeProgram:
    """Generator parameters for one phenotype analog.

    ``amplitudes`` and ``phases`` hold one entry per planted region
    (LV regions first, then RV).
    """

    label: str
    amplitudes: list[float]
    phases: list[float]
    cavity_scale: float = 1.0
    rv_scale: float = 1.0
    wall_thickness: float = 1.0
    es_frame: int = 9

    def __post_init__(self):
        if len(self.amplitudes) != len(self.phases):
            raise ValueError("amplitudes and phases must have one entry per region")
        if min(self.amplitudes) < 0:
            raise ValueError("amplitudes must be non-negative")
        if not all(0.0 <= p < 1.0 for p in self.phases):
            raise ValueError("phases must lie in [0, 1)")


@dataclass(frozen=True)
class RegionGrid:
    bands: int = 4
    sectors: int = 2

    @property
    def per_chamber(self) -> int:
        return self.bands * self.sectors

    @property
    def total(self) -> int:
        return 2 * self.per_chamber


@dataclass
class SyntheticCohort:
    sequences: list[MeshSequence]
    planted: RegionPartition
    programs: dict[str, PhenotypeProgram]
    grid: RegionGrid
    subject_info: dict[str, dict] = field(default_factory=dict)


def _base_pattern(grid: RegionGrid, chamber: Chamber):
    amps, phases = [], []
    for b in range(grid.bands):
        for s in range(grid.sectors):
            amp = BASE_AMPLITUDE[chamber] * BAND_AMPLITUDE[b % len(BAND_AMPLITUDE)]
            ph = BAND_PHASE[b % len(BAND_PHASE)]
            if s == 0:  # sector 0 faces the other chamber
                amp *= SEPTAL_AMPLITUDE
                ph += SEPTAL_PHASE
            amps.append(amp)
            phases.append(ph)
    return np.array(amps), np.array(phases)


def default_programs(grid: RegionGrid = RegionGrid()) -> dict[str, PhenotypeProgram]:
    """NOR, DCM, HCM and RV-abnormality analogs on the given region grid."""
    lv_a, lv_p = _base_pattern(grid, Chamber.LV)
    rv_a, rv_p = _base_pattern(grid, Chamber.RV)
    septal = np.tile(np.arange(grid.sectors) == 0, grid.bands)
    apical = np.repeat(np.arange(grid.bands) >= grid.bands / 2, grid.sectors)

    def prog(label, lv_gain, rv_gain, **kw):
        amps = np.concatenate([lv_a * lv_gain, rv_a * rv_gain])
        return PhenotypeProgram(label, amps.round(5).tolist(),
                                np.concatenate([lv_p, rv_p]).round(5).tolist(), **kw)

    return {
        "NOR": prog("NOR", 1.0, 1.0, es_frame=9),
        # dilated, globally hypokinetic with worse septal motion
        "DCM": prog("DCM", np.where(septal, 0.3, 0.45), 0.85,
                    cavity_scale=1.35, wall_thickness=0.8, es_frame=10),
        # small thick-walled LV, hyperdynamic apex, stiff septum
        "HCM": prog("HCM", np.where(septal, 0.8, 1.15) * np.where(apical, 1.15, 1.0), 1.0,
                    cavity_scale=0.8, wall_thickness=1.7, es_frame=8),
        # dilated, hypokinetic RV
        "RV": prog("RV", 0.95, 0.4, rv_scale=1.45, es_frame=9),
    }


def contraction_profile(tau: np.ndarray, peak: float) -> np.ndarray:
    """0 at tau=0, 1 at ``peak``, smooth return towards 0 at tau=1."""
    tau = np.asarray(tau, dtype=np.float64)
    rise = np.sin(0.5 * np.pi * np.clip(tau / peak, 0.0, 1.0)) ** 2
    fall = np.cos(0.5 * np.pi * np.clip((tau - peak) / (1.0 - peak), 0.0, 1.0)) ** 2
    return np.where(tau <= peak, rise, fall)


class _Template:
    """Topology, per-vertex parameterisation and region layout."""

    def __init__(self, resolution: tuple[int, int], grid: RegionGrid, smoothing: int):
        rings, segs = resolution
        if rings < 2 * grid.bands or segs < 3 * grid.sectors:
            raise ValueError(
                f"resolution {resolution} too low for {grid.bands} bands x {grid.sectors} sectors"
            )
        unit, faces, theta, phi = uv_ellipsoid(rings, segs)
        n = len(unit)
        self.n_per = n
        self.unit = np.concatenate([unit, unit])
        self.theta = np.concatenate([theta, theta])
        # RV sits on the +x side of the LV, so its septum faces -x
        self.phi_rel = np.concatenate([phi, np.mod(phi - np.pi, 2 * np.pi)])
        self.chamber = np.repeat(np.array([Chamber.LV, Chamber.RV], dtype=np.uint8), n)
        self.topology = MeshTopology(np.concatenate([faces, faces + n]), self.chamber)

        band = np.minimum((self.theta / np.pi * grid.bands).astype(int), grid.bands - 1)
        width = 2 * np.pi / grid.sectors
        sector = (np.mod(self.phi_rel + width / 2, 2 * np.pi) // width).astype(int)
        region = self.chamber.astype(int) * grid.per_chamber + band * grid.sectors + sector
        counts = np.bincount(region, minlength=grid.total)
        if np.any(counts < 3):
            raise ValueError(f"resolution {resolution} leaves a planted region nearly empty")
        self.region = region

        onehot = np.eye(grid.total)[region]
        edges = self.topology.edges
        deg = np.bincount(edges.ravel(), minlength=2 * n).astype(np.float64)
        w = onehot
        for _ in range(smoothing):
            acc = w.copy()
            np.add.at(acc, edges[:, 0], w[edges[:, 1]])
            np.add.at(acc, edges[:, 1], w[edges[:, 0]])
            w = acc / (1.0 + deg)[:, None]
        self.weights = w

        inward = -self.unit / np.linalg.norm(self.unit, axis=1, keepdims=True)
        dirs = np.zeros((grid.total, 3))
        np.add.at(dirs, region, inward)
        self.region_dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _subject_shape(tpl: _Template, prog: PhenotypeProgram, rng: np.random.Generator):
    size = float(np.clip(1.0 + 0.06 * rng.standard_normal(), 0.85, 1.15))
    axis_jit = np.clip(1.0 + 0.03 * rng.standard_normal(3), 0.92, 1.08)
    rv_jit = float(np.clip(1.0 + 0.05 * rng.standard_normal(), 0.88, 1.12))
    wall = prog.wall_thickness * float(np.clip(1.0 + 0.05 * rng.standard_normal(), 0.88, 1.12))

    a = LV_RADIUS * prog.cavity_scale * size
    lv_axes = np.array([a, a, a * LV_ELONGATION]) * axis_jit
    rv_axes = np.array(RV_AXES) * prog.rv_scale * rv_jit * size
    n = tpl.n_per
    lv = tpl.unit[:n] * lv_axes
    # thicker walls encroach on the cavity from the septal side
    cos_sept = np.maximum(np.cos(tpl.phi_rel[:n]), 0.0)
    bulge = 1.0 - 0.22 * max(wall - 1.0, 0.0) * cos_sept**2 * np.sin(tpl.theta[:n])
    lv[:, :2] *= bulge[:, None]
    rv_center = np.array([lv_axes[0] + rv_axes[0] + CHAMBER_GAP, 0.0, 0.15 * lv_axes[2]])
    rv = tpl.unit[n:] * rv_axes + rv_center
    centers = np.stack([np.zeros(3), rv_center])
    return np.concatenate([lv, rv]), centers, dict(size=size, wall_thickness=wall)


def _subject_motion(tpl, grid, ed, centers, prog, rng, blend, size):
    """ED-relative displacement field (T, N, 3)."""
    # larger hearts of the same phenotype contract less (shape-motion coupling)
    amp_gain = float(np.clip(1.0 + 0.03 * rng.standard_normal(), 0.9, 1.1)) / size
    amps = np.asarray(prog.amplitudes) * amp_gain
    # offsets are centred so the chamber volume bottoms out near es_frame
    phases = np.asarray(prog.phases)
    peaks = prog.es_frame / N_FRAMES + phases - phases.mean()
    tau = np.arange(N_FRAMES) / N_FRAMES
    profiles = np.stack([contraction_profile(tau, p) for p in peaks], axis=1)  # (T, G)

    center_v = centers[tpl.chamber]
    rel = center_v - ed
    dist = np.linalg.norm(rel, axis=1)
    radial = rel / dist[:, None]
    rho = np.bincount(tpl.region, weights=dist, minlength=grid.total) / np.bincount(
        tpl.region, minlength=grid.total
    )
    # per-vertex, per-region displacement direction blends region and radial axes
    # disp[t, v] = sum_g w[v, g] * amp_g * f_g(t) * rho_g * (blend * d_g + (1 - blend) * r_v)
    coeff = tpl.weights * (amps * rho)[None]  # (N, G)
    scal = profiles @ coeff.T  # (T, N) radial part weight
    dir_part = np.einsum("ng,tg,gk->tnk", coeff, profiles, tpl.region_dirs)
    return blend * dir_part + (1.0 - blend) * scal[..., None] * radial[None]


def generate_cohort(
    n_per_phenotype: int,
    programs: dict[str, PhenotypeProgram] | None = None,
    mesh_resolution: tuple[int, int] = (20, 24),
    seed: int = 0,
    grid: RegionGrid = RegionGrid(),
    blend: float = 0.9,
    smoothing: int = 0,
) -> SyntheticCohort:
    """Generate ``n_per_phenotype`` subjects for every program.

    Subject ``i`` (in cohort order) draws its randomness from
    ``SeedSequence([seed, i])`` so generation order never matters.
    """
    if n_per_phenotype < 1:
        raise ValueError("n_per_phenotype must be >= 1")
    programs = programs or default_programs(grid)
    tpl = _Template(mesh_resolution, grid, smoothing)
    for prog in programs.values():
        if len(prog.amplitudes) != grid.total:
            raise ValueError(f"program {prog.label} has {len(prog.amplitudes)} regions, grid has {grid.total}")

    sequences, info = [], {}
    index = 0
    for label, prog in programs.items():
        for i in range(n_per_phenotype):
            rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
            index += 1
            ed, centers, shape_info = _subject_shape(tpl, prog, rng)
            disp = _subject_motion(tpl, grid, ed, centers, prog, rng, blend, shape_info["size"])
            frames = ed[None] + disp
            sid = f"{label}_{i:03d}"
            seq = MeshSequence(frames, tpl.topology, label, sid)
            vols = {c.name: [chamber_volume(f, tpl.topology, c) for f in frames] for c in Chamber}
            shape_info.update(
                es_frame=prog.es_frame,
                lv_edv=vols["LV"][0],
                rv_edv=vols["RV"][0],
                lv_ef=1.0 - min(vols["LV"]) / vols["LV"][0],
                rv_ef=1.0 - min(vols["RV"]) / vols["RV"][0],
            )
            seq.meta.update(shape_info)
            info[sid] = shape_info
            sequences.append(seq)

    adjacency = build_region_adjacency(tpl.region, tpl.topology, grid.total)
    planted = RegionPartition(tpl.region, adjacency)
    return SyntheticCohort(sequences, planted, dict(programs), grid, info)


def split_subjects(cohort: list[MeshSequence], seed: int = 0,
                   ratios=(7, 1, 2)) -> dict[str, str]:
    """Stratified-by-phenotype train/val/test assignment, subject id -> split."""
    rng = np.random.default_rng(seed)
    total = float(sum(ratios))
    out = {}
    by_pheno: dict[str, list[str]] = {}
    for seq in cohort:
        by_pheno.setdefault(seq.phenotype, []).append(seq.subject_id)
    for label in sorted(by_pheno):
        ids = by_pheno[label]
        order = rng.permutation(len(ids))
        n_train = int(round(len(ids) * ratios[0] / total))
        n_val = int(round(len(ids) * ratios[1] / total))
        if len(ids) >= 3:
            n_train = min(max(n_train, 1), len(ids) - 2)
            n_val = max(n_val, 1)
        for rank, j in enumerate(order):
            out[ids[j]] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return out


def write_cohort(directory, cohort: SyntheticCohort, split_seed: int = 0) -> dict[str, str]:
    """Write the cohort container plus ``programs.json`` and ``planted.json``."""
    directory = Path(directory)
    split = split_subjects(cohort.sequences, split_seed)
    extra = {sid: {"split": split[sid], **cohort.subject_info[sid]} for sid in split}
    save_cohort(directory, cohort.sequences,
                extra={"generator": {"grid": asdict(cohort.grid)}}, subject_extra=extra)
    (directory / "programs.json").write_text(
        json.dumps({k: asdict(v) for k, v in cohort.programs.items()}, indent=2)
    )
    (directory / "planted.json").write_text(
        json.dumps({"assignment": cohort.planted.assignment.tolist(),
                    "adjacency": cohort.planted.adjacency.tolist()})
    )
    return split


__all__ = [
    "PHENOTYPES",
    "N_FRAMES",
    "PhenotypeProgram",
    "RegionGrid",
    "SyntheticCohort",
    "contraction_profile",
    "default_programs",
    "generate_cohort",
    "split_subjects",
    "write_cohort",
]
