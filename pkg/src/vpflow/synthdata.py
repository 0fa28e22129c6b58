"""Synthetic LV-like shell populations with known covariate -> shape couplings.

Stands in for a real corresponded mesh cohort: every subject is a smooth
deformation (size, elongation, wall thickness, bending) of a base
endo/epi icosphere shell pair, with the deformation factors driven by a
configurable linear coupling from the covariates, optional shape
clusters, and Gaussian noise.  Ground-truth factors are stored so tests
can verify the generator against its own couplings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import SurfaceMesh, enclosed_volume
from .solids import make_icosphere

FACTOR_NAMES = ("size", "elongation", "thickness", "bending")

DEFAULT_COVARIATES = (
    "gender",
    "age",
    "height",
    "weight",
    "pulse",
    "alcohol",
    "smoking",
    "hba1c",
    "cholesterol",
    "crp",
    "glucose",
    "hdl",
    "igf1",
    "ldl",
)

# Plausible sampling ranges (documentation values, not clinical claims).
_COVARIATE_RANGES = {
    "gender": (0, 1),
    "age": (40.0, 75.0),
    "height": (150.0, 195.0),
    "weight": (50.0, 110.0),
    "pulse": (50.0, 100.0),
    "alcohol": (0, 1),
    "smoking": (0, 1),
    "hba1c": (25.0, 50.0),
    "cholesterol": (3.0, 8.0),
    "crp": (0.1, 10.0),
    "glucose": (4.0, 8.0),
    "hdl": (0.8, 2.5),
    "igf1": (10.0, 35.0),
    "ldl": (1.5, 5.0),
}


class SynthError(ValueError):
    """Raised for invalid generator specifications."""


@dataclass
class SynthSpec:
    n_subjects: int = 100
    subdivisions: int = 2
    endo_radius: float = 20.0
    epi_radius: float = 26.0
    covariates: tuple[str, ...] = DEFAULT_COVARIATES
    # coupling[covariate][factor] -> weight applied to the standardized covariate
    coupling: dict = field(default_factory=dict)
    noise_scale: float = 0.05
    n_clusters: int = 1
    cluster_spread: float = 1.5
    seed: int = 0

    def __post_init__(self):
        self.covariates = tuple(self.covariates)
        if self.n_subjects < 2:
            raise SynthError("n_subjects must be >= 2")
        if not 1 <= self.n_clusters <= 3:
            raise SynthError("n_clusters must be in {1, 2, 3}")
        for name in self.covariates:
            if name not in _COVARIATE_RANGES:
                raise SynthError(f"unknown covariate: {name!r}")
        for cov, factors in self.coupling.items():
            if cov not in self.covariates:
                raise SynthError(f"coupling references unknown covariate: {cov!r}")
            for fac, weight in factors.items():
                if fac not in FACTOR_NAMES:
                    raise SynthError(f"coupling references unknown shape factor: {fac!r}")
                if not np.isfinite(weight):
                    raise SynthError(f"non-finite coupling weight for {cov!r}/{fac!r}")

    def coupling_matrix(self) -> np.ndarray:
        """(n_factors, n_covariates) weight matrix in schema order."""
        mat = np.zeros((len(FACTOR_NAMES), len(self.covariates)))
        for cov, factors in self.coupling.items():
            j = self.covariates.index(cov)
            for fac, weight in factors.items():
                mat[FACTOR_NAMES.index(fac), j] = float(weight)
        return mat

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "subdivisions": self.subdivisions,
            "endo_radius": self.endo_radius,
            "epi_radius": self.epi_radius,
            "covariates": list(self.covariates),
            "coupling": self.coupling,
            "noise_scale": self.noise_scale,
            "n_clusters": self.n_clusters,
            "cluster_spread": self.cluster_spread,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SynthError(f"unknown spec keys: {sorted(unknown)}")
        d = dict(d)
        if "covariates" in d:
            d["covariates"] = tuple(d["covariates"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SynthRecord:
    subject_id: str
    endo: SurfaceMesh
    epi: SurfaceMesh
    covariates: np.ndarray  # raw (unstandardized) values in schema order
    factors: np.ndarray  # ground-truth shape factors in FACTOR_NAMES order


def _sample_covariates(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    cols = []
    for name in spec.covariates:
        lo, hi = _COVARIATE_RANGES[name]
        if isinstance(lo, int) and (lo, hi) == (0, 1):
            cols.append(rng.integers(0, 2, size=spec.n_subjects).astype(np.float64))
        else:
            cols.append(rng.uniform(lo, hi, size=spec.n_subjects))
    return np.column_stack(cols)


def deform_shells(
    endo_base: SurfaceMesh, epi_base: SurfaceMesh, factors: np.ndarray
) -> tuple[SurfaceMesh, SurfaceMesh]:
    """Apply (size, elongation, thickness, bending) to the base shell pair.

    Size scales both shells, elongation stretches the long (z) axis,
    thickness moves only the epicardial shell radially, bending shears x
    with z^2.  All maps are smooth and keep the shells closed.
    """
    size, elong, thick, bend = factors

    def warp(pos: np.ndarray, radial_extra: float, radius: float) -> np.ndarray:
        p = pos * (1.0 + 0.15 * size) * (1.0 + radial_extra)
        p = p * np.array([1.0, 1.0, 1.0 + 0.10 * elong])
        out = p.copy()
        out[:, 0] = p[:, 0] + 0.08 * bend * p[:, 2] ** 2 / radius
        return out

    endo = endo_base.with_positions(warp(endo_base.positions, 0.0, np.abs(endo_base.positions).max()))
    epi = epi_base.with_positions(
        warp(epi_base.positions, 0.10 * thick, np.abs(epi_base.positions).max())
    )
    return endo, epi


def generate_population(spec: SynthSpec) -> list[SynthRecord]:
    """Deterministic synthetic cohort; same spec gives bitwise-identical output."""
    rng = np.random.default_rng(spec.seed)
    endo_base = make_icosphere(spec.endo_radius, spec.subdivisions)
    epi_base = make_icosphere(spec.epi_radius, spec.subdivisions)

    raw_cov = _sample_covariates(spec, rng)
    std = raw_cov.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    cov_std = (raw_cov - raw_cov.mean(axis=0)) / std

    coupling = spec.coupling_matrix()
    cluster_ids = (
        rng.integers(0, spec.n_clusters, size=spec.n_subjects)
        if spec.n_clusters > 1
        else np.zeros(spec.n_subjects, dtype=int)
    )
    # Cluster offsets act on the size factor, symmetric around zero.
    offsets = (
        np.linspace(-1.0, 1.0, spec.n_clusters) * spec.cluster_spread
        if spec.n_clusters > 1
        else np.zeros(1)
    )

    records = []
    child_seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_subjects)
    for i in range(spec.n_subjects):
        subject_rng = np.random.default_rng(child_seeds[i])
        base_factors = coupling @ cov_std[i]
        base_factors[0] += offsets[cluster_ids[i]]
        for attempt in range(100):
            factors = base_factors + subject_rng.normal(0.0, spec.noise_scale, size=4)
            endo, epi = deform_shells(endo_base, epi_base, factors)
            if enclosed_volume(epi) > enclosed_volume(endo) > 0:
                break
        else:
            raise SynthError(
                f"subject {i}: could not produce a valid shell pair in 100 attempts "
                "(thickness coupling drives the wall non-positive)"
            )
        records.append(
            SynthRecord(
                subject_id=f"{i:05d}",
                endo=endo,
                epi=epi,
                covariates=raw_cov[i],
                factors=factors,
            )
        )
    return records
