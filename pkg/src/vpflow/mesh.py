"""Triangle meshes with shared topology: distances, volumes, spectral operators, file IO."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Raised for invalid mesh data or mismatched topologies."""


@dataclass(frozen=True)
class TriangleTopology:
    """Fixed connectivity shared across a population of corresponded meshes."""

    n_vertices: int
    faces: np.ndarray  # (n_faces, 3) int

    def __post_init__(self):
        faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must be (n, 3), got {faces.shape}")
        if faces.size and (faces.min() < 0 or faces.max() >= self.n_vertices):
            raise MeshError("face index out of range")
        if faces.size and (
            (faces[:, 0] == faces[:, 1])
            | (faces[:, 1] == faces[:, 2])
            | (faces[:, 0] == faces[:, 2])
        ).any():
            raise MeshError("degenerate face with repeated vertex index")
        object.__setattr__(self, "faces", faces)
        faces.setflags(write=False)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def edges(self) -> np.ndarray:
        """Undirected edges as sorted (i, j) pairs with i < j, lexicographically ordered."""
        if self.n_faces == 0:
            return np.empty((0, 2), dtype=np.int64)
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [0, 2]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TriangleTopology)
            and self.n_vertices == other.n_vertices
            and self.faces.shape == other.faces.shape
            and bool(np.array_equal(self.faces, other.faces))
        )

    def __hash__(self):
        return hash((self.n_vertices, self.faces.tobytes()))


@dataclass(frozen=True)
class SurfaceMesh:
    """Vertex positions (mm) attached to a shared triangle topology."""

    topology: TriangleTopology
    positions: np.ndarray  # (n_vertices, 3) float

    def __post_init__(self):
        pos = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        if pos.shape != (self.topology.n_vertices, 3):
            raise MeshError(
                f"positions shape {pos.shape} does not match "
                f"({self.topology.n_vertices}, 3)"
            )
        if not np.isfinite(pos).all():
            raise MeshError("non-finite vertex coordinate")
        object.__setattr__(self, "positions", pos)
        pos.setflags(write=False)

    def with_positions(self, positions: np.ndarray) -> "SurfaceMesh":
        return SurfaceMesh(self.topology, positions)

    def translated(self, offset) -> "SurfaceMesh":
        return self.with_positions(self.positions + np.asarray(offset, dtype=np.float64))

    def scaled(self, factor: float) -> "SurfaceMesh":
        return self.with_positions(self.positions * float(factor))


def enclosed_volume(mesh: SurfaceMesh) -> float:
    """Volume enclosed by a closed, consistently oriented surface.

    Signed tetrahedron sum V = (1/6) |sum_f v0 . (v1 x v2)|.  Exact for
    closed triangle meshes and translation-invariant; on open surfaces the
    result depends on orientation and origin and is not meaningful.
    """
    faces = mesh.topology.faces
    if len(faces) == 0:
        raise MeshError("cannot compute volume of a mesh with no faces")
    # Subtract the centroid so the sum is numerically translation-invariant.
    pos = mesh.positions - mesh.positions.mean(axis=0)
    v0, v1, v2 = pos[faces[:, 0]], pos[faces[:, 1]], pos[faces[:, 2]]
    signed = np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0
    return abs(float(signed))


def myocardial_volume(epi: SurfaceMesh, endo: SurfaceMesh) -> float:
    """Wall volume between an outer (epi) and inner (endo) closed surface."""
    return enclosed_volume(epi) - enclosed_volume(endo)


def mean_vertex_distance(a: SurfaceMesh, b: SurfaceMesh) -> float:
    """Mean per-vertex Euclidean distance between two corresponded meshes."""
    if a.topology != b.topology:
        raise MeshError("meshes do not share a topology")
    return float(np.linalg.norm(a.positions - b.positions, axis=1).mean())


def adjacency_matrix(topology: TriangleTopology) -> sp.csr_matrix:
    edges = topology.edges
    n = topology.n_vertices
    if len(edges) == 0:
        return sp.csr_matrix((n, n))
    i = np.concatenate([edges[:, 0], edges[:, 1]])
    j = np.concatenate([edges[:, 1], edges[:, 0]])
    return sp.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))


def scaled_laplacian(topology: TriangleTopology, lambda_max: float = 2.0) -> sp.csr_matrix:
    """Rescaled symmetric-normalised graph Laplacian L~ = 2 L / lambda_max - I.

    lambda_max defaults to 2, a valid upper bound on the spectrum of the
    normalised Laplacian, so eigenvalues of L~ lie in [-1, 1].  Isolated
    vertices get identity rows in L, which rescale to zero rows in L~.
    """
    n = topology.n_vertices
    adj = adjacency_matrix(topology)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        d_inv_sqrt = 1.0 / np.sqrt(deg)
    d_inv_sqrt[~np.isfinite(d_inv_sqrt)] = 0.0
    d_half = sp.diags(d_inv_sqrt)
    lap = sp.identity(n) - d_half @ adj @ d_half
    scaled = (2.0 / lambda_max) * lap - sp.identity(n)
    return sp.csr_matrix(scaled)


def _merge_shells(*meshes: SurfaceMesh) -> tuple[TriangleTopology, np.ndarray]:
    faces, positions, offset = [], [], 0
    for m in meshes:
        faces.append(m.topology.faces + offset)
        positions.append(m.positions)
        offset += m.topology.n_vertices
    return TriangleTopology(offset, np.concatenate(faces)), np.concatenate(positions)


def merge_meshes(*meshes: SurfaceMesh) -> SurfaceMesh:
    """Disjoint union of meshes into a single multi-component surface."""
    topo, pos = _merge_shells(*meshes)
    return SurfaceMesh(topo, pos)


# ---------------------------------------------------------------------------
# File IO: OFF and ASCII PLY
# ---------------------------------------------------------------------------


def save_mesh(mesh: SurfaceMesh, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".off":
        _save_off(mesh, path)
    elif path.suffix.lower() == ".ply":
        _save_ply(mesh, path)
    else:
        raise MeshError(f"unsupported mesh format: {path.suffix}")


def load_mesh(path) -> SurfaceMesh:
    path = Path(path)
    if path.suffix.lower() == ".off":
        return _load_off(path)
    if path.suffix.lower() == ".ply":
        return _load_ply(path)
    raise MeshError(f"unsupported mesh format: {path.suffix}")


def _save_off(mesh: SurfaceMesh, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.topology.n_vertices} {mesh.topology.n_faces} 0\n")
        for p in mesh.positions:
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        for f in mesh.topology.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def _load_off(path: Path) -> SurfaceMesh:
    tokens = _token_stream(path, skip_first="OFF")
    try:
        n_vertices, n_faces, _ = (int(next(tokens)) for _ in range(3))
        positions = np.array(
            [float(next(tokens)) for _ in range(3 * n_vertices)]
        ).reshape(n_vertices, 3)
        faces = []
        for _ in range(n_faces):
            k = int(next(tokens))
            if k != 3:
                raise MeshError(f"non-triangle face with {k} vertices in {path}")
            faces.append([int(next(tokens)) for _ in range(3)])
    except StopIteration:
        raise MeshError(f"truncated OFF file: {path}") from None
    return _build_mesh(n_vertices, faces, positions, path)


def _save_ply(mesh: SurfaceMesh, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.topology.n_vertices}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {mesh.topology.n_faces}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for p in mesh.positions:
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        for f in mesh.topology.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def _load_ply(path: Path) -> SurfaceMesh:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshError(f"not a PLY file: {path}")
    n_vertices = n_faces = None
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if parts[:2] == ["format", "binary_little_endian"] or parts[:2] == [
            "format",
            "binary_big_endian",
        ]:
            raise MeshError(f"binary PLY is not supported: {path}")
        if parts[:2] == ["element", "vertex"]:
            n_vertices = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_faces = int(parts[2])
        elif parts[:1] == ["end_header"]:
            body_start = i + 1
            break
    if body_start is None or n_vertices is None or n_faces is None:
        raise MeshError(f"malformed PLY header: {path}")
    body = lines[body_start:]
    if len(body) < n_vertices + n_faces:
        raise MeshError(f"truncated PLY file: {path}")
    positions = np.array(
        [[float(v) for v in body[i].split()[:3]] for i in range(n_vertices)]
    )
    faces = []
    for i in range(n_vertices, n_vertices + n_faces):
        parts = [int(v) for v in body[i].split()]
        if parts[0] != 3:
            raise MeshError(f"non-triangle face with {parts[0]} vertices in {path}")
        faces.append(parts[1:4])
    return _build_mesh(n_vertices, faces, positions, path)


def _build_mesh(n_vertices, faces, positions, path) -> SurfaceMesh:
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= n_vertices):
        raise MeshError(f"face index out of range in {path}")
    return SurfaceMesh(TriangleTopology(n_vertices, faces), positions)


def _token_stream(path: Path, skip_first: str | None = None):
    with open(path) as fh:
        first = True
        for line in fh:
            line = line.split("#", 1)[0]
            for tok in line.split():
                if first and skip_first is not None:
                    first = False
                    if tok != skip_first:
                        raise MeshError(f"missing {skip_first} header in {path}")
                    continue
                first = False
                yield tok
