"""On-disk cohort layout: mesh files per subject plus covariate tables.

Layout (one directory per cohort):
    meshes/{id}_endo.ply
    meshes/{id}_epi.ply
    covariates.csv      # header: id,<covariate names...>; raw values
    ground_truth.csv    # optional, generator shape factors
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import MeshError, SurfaceMesh, TriangleTopology, load_mesh, save_mesh
from .synthdata import FACTOR_NAMES, SynthRecord


class DatasetError(ValueError):
    """Raised for malformed or incomplete cohort directories."""


@dataclass
class Cohort:
    ids: list[str]
    schema: list[str]
    covariates: np.ndarray  # raw values, (N, n_covariates)
    endo: list[SurfaceMesh]
    epi: list[SurfaceMesh]

    def __len__(self) -> int:
        return len(self.ids)

    def merged_topology(self) -> TriangleTopology:
        from .mesh import merge_meshes

        return merge_meshes(self.endo[0], self.epi[0]).topology

    def merged_positions(self) -> np.ndarray:
        """(N, n_endo + n_epi, 3) stacked shell coordinates for training."""
        return np.stack(
            [np.concatenate([e.positions, p.positions]) for e, p in zip(self.endo, self.epi)]
        )

    def n_endo_vertices(self) -> int:
        return self.endo[0].topology.n_vertices


def split_merged_positions(positions: np.ndarray, n_endo: int):
    """Undo merged_positions: returns (endo, epi) position blocks."""
    return positions[..., :n_endo, :], positions[..., n_endo:, :]


def split_merged_topology(topology: TriangleTopology, n_endo: int):
    """Recover (endo, epi) topologies from a merged two-shell topology."""
    faces = topology.faces
    endo_mask = (faces < n_endo).all(axis=1)
    epi_mask = (faces >= n_endo).all(axis=1)
    if not (endo_mask | epi_mask).all():
        raise DatasetError("merged topology has faces crossing the shell boundary")
    endo = TriangleTopology(n_endo, faces[endo_mask])
    epi = TriangleTopology(topology.n_vertices - n_endo, faces[epi_mask] - n_endo)
    return endo, epi


def write_dataset(records: list[SynthRecord], schema, out_dir) -> None:
    out_dir = Path(out_dir)
    mesh_dir = out_dir / "meshes"
    mesh_dir.mkdir(parents=True, exist_ok=True)
    schema = list(schema)
    with open(out_dir / "covariates.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + schema)
        for rec in records:
            writer.writerow([rec.subject_id] + [repr(float(v)) for v in rec.covariates])
    with open(out_dir / "ground_truth.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + list(FACTOR_NAMES))
        for rec in records:
            writer.writerow([rec.subject_id] + [repr(float(v)) for v in rec.factors])
    for rec in records:
        save_mesh(rec.endo, mesh_dir / f"{rec.subject_id}_endo.ply")
        save_mesh(rec.epi, mesh_dir / f"{rec.subject_id}_epi.ply")


def read_covariates_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    """Returns (ids, schema, values) from an id-keyed covariates table."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id":
            raise DatasetError(f"covariates file must start with an 'id' column: {path}")
        schema = header[1:]
        ids, rows = [], []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"row length mismatch in {path}: {row}")
            ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return ids, schema, np.asarray(rows, dtype=np.float64)


def load_cohort(directory) -> Cohort:
    directory = Path(directory)
    cov_path = directory / "covariates.csv"
    if not cov_path.exists():
        raise DatasetError(f"missing covariates.csv in {directory}")
    ids, schema, covariates = read_covariates_csv(cov_path)
    mesh_dir = directory / "meshes"
    endo, epi = [], []
    for sid in ids:
        endo_path = mesh_dir / f"{sid}_endo.ply"
        epi_path = mesh_dir / f"{sid}_epi.ply"
        if not endo_path.exists() or not epi_path.exists():
            raise DatasetError(f"missing mesh files for subject {sid} in {mesh_dir}")
        endo.append(load_mesh(endo_path))
        epi.append(load_mesh(epi_path))
    if endo:
        topo_e, topo_p = endo[0].topology, epi[0].topology
        for sid, e, p in zip(ids, endo, epi):
            if e.topology != topo_e or p.topology != topo_p:
                raise DatasetError(f"subject {sid} has mismatched topology")
    return Cohort(ids=ids, schema=schema, covariates=covariates, endo=endo, epi=epi)
