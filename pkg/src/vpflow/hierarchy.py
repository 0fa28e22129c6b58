"""Hierarchical mesh coarsening: QEM edge collapse, down/up-sampling matrices."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import MeshError, SurfaceMesh, TriangleTopology, scaled_laplacian


@dataclass(frozen=True)
class SamplingHierarchy:
    """Coarsening pyramid: topologies[0] is the input resolution.

    downs[k] maps level-k vertex data to level-(k+1); ups[k] maps back.
    laplacians[k] is the rescaled normalised Laplacian of topologies[k].
    """

    topologies: list[TriangleTopology]
    reference_positions: list[np.ndarray]
    downs: list[sp.csr_matrix]
    ups: list[sp.csr_matrix]
    laplacians: list[sp.csr_matrix]

    @property
    def n_levels(self) -> int:
        return len(self.downs)

    def vertex_counts(self) -> list[int]:
        return [t.n_vertices for t in self.topologies]


def _face_quadrics(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per-vertex sum of plane quadrics p p^T over incident faces."""
    n = len(positions)
    v0, v1, v2 = (positions[faces[:, i]] for i in range(3))
    normals = np.cross(v1 - v0, v2 - v0)
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    normals = normals / norms
    d = -np.einsum("ij,ij->i", normals, v0)
    planes = np.concatenate([normals, d[:, None]], axis=1)  # (F, 4)
    quadrics = np.zeros((n, 4, 4))
    outer = planes[:, :, None] * planes[:, None, :]
    for corner in range(3):
        np.add.at(quadrics, faces[:, corner], outer)
    return quadrics


def _collapse_cost(quadrics, positions, a: int, b: int) -> float:
    """Cost of contracting vertex a into vertex b (b keeps its position)."""
    v = np.append(positions[b], 1.0)
    q = quadrics[a] + quadrics[b]
    return float(v @ q @ v)


def decimate(
    topology: TriangleTopology, reference_positions: np.ndarray, target: int
) -> tuple[TriangleTopology, np.ndarray, np.ndarray]:
    """QEM half-edge collapse down to `target` vertices.

    Collapses always remove one endpoint and keep the other at its original
    position, so coarse vertices are a subset of the fine ones.  Ties are
    broken by lowest (removed, kept) index pair for reproducibility.

    Returns (coarse_topology, kept_indices, vertex_map) where vertex_map[i]
    gives the kept fine vertex each fine vertex was merged into.
    """
    n = topology.n_vertices
    if target < 4:
        raise MeshError("cannot decimate below 4 vertices")
    if target >= n:
        raise MeshError(f"target {target} is not below vertex count {n}")
    positions = np.asarray(reference_positions, dtype=np.float64)
    quadrics = _face_quadrics(positions, topology.faces)

    neighbors: list[set[int]] = [set() for _ in range(n)]
    for i, j in topology.edges:
        neighbors[i].add(int(j))
        neighbors[j].add(int(i))

    version = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    parent = np.arange(n)

    def push(a: int, b: int, heap):
        cost = _collapse_cost(quadrics, positions, a, b)
        heapq.heappush(heap, (cost, a, b, version[a], version[b]))

    heap: list = []
    for i, j in topology.edges:
        push(int(i), int(j), heap)
        push(int(j), int(i), heap)

    remaining = n
    while remaining > target:
        if not heap:
            raise MeshError("ran out of collapsible edges before reaching target")
        cost, a, b, va, vb = heapq.heappop(heap)
        if not (alive[a] and alive[b]) or va != version[a] or vb != version[b]:
            continue
        if b not in neighbors[a]:
            continue
        # Contract a into b.
        alive[a] = False
        parent[a] = b
        quadrics[b] = quadrics[a] + quadrics[b]
        neighbors[a].discard(b)
        neighbors[b].discard(a)
        for nb in neighbors[a]:
            neighbors[nb].discard(a)
            if nb != b:
                neighbors[nb].add(b)
                neighbors[b].add(nb)
        neighbors[a].clear()
        version[b] += 1
        for nb in sorted(neighbors[b]):
            push(b, nb, heap)
            push(nb, b, heap)
        remaining -= 1

    # Path-compress the collapse map.
    vertex_map = np.arange(n)
    for i in range(n):
        r = i
        while parent[r] != r:
            r = parent[r]
        vertex_map[i] = r

    kept = np.flatnonzero(alive)
    coarse_index = {int(v): k for k, v in enumerate(kept)}
    mapped = np.vectorize(lambda v: coarse_index[int(vertex_map[v])])(topology.faces)
    keep_face = (
        (mapped[:, 0] != mapped[:, 1])
        & (mapped[:, 1] != mapped[:, 2])
        & (mapped[:, 0] != mapped[:, 2])
    )
    coarse_faces = np.unique(mapped[keep_face], axis=0)
    coarse_topology = TriangleTopology(len(kept), coarse_faces)
    return coarse_topology, kept, vertex_map


def _closest_point_barycentric(p: np.ndarray, tri: np.ndarray) -> tuple[np.ndarray, float]:
    """Barycentric coordinates of the closest point on a triangle to p."""
    a, b, c = tri
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        w = np.array([1.0, 0.0, 0.0])
        return w, float(np.linalg.norm(p - a))
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        w = np.array([0.0, 1.0, 0.0])
        return w, float(np.linalg.norm(p - b))
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        v = d1 / (d1 - d3) if d1 != d3 else 0.0
        w = np.array([1.0 - v, v, 0.0])
        return w, float(np.linalg.norm(p - (a + v * ab)))
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        w = np.array([0.0, 0.0, 1.0])
        return w, float(np.linalg.norm(p - c))
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        u = d2 / (d2 - d6) if d2 != d6 else 0.0
        w = np.array([1.0 - u, 0.0, u])
        return w, float(np.linalg.norm(p - (a + u * ac)))
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        w = np.array([0.0, 1.0 - t, t])
        return w, float(np.linalg.norm(p - (b + t * (c - b))))
    denom = 1.0 / (va + vb + vc)
    v, u = vb * denom, vc * denom
    w = np.array([1.0 - v - u, v, u])
    closest = a + v * ab + u * ac
    return w, float(np.linalg.norm(p - closest))


def _up_matrix(
    fine_positions: np.ndarray,
    kept: np.ndarray,
    coarse_topology: TriangleTopology,
    coarse_positions: np.ndarray,
) -> sp.csr_matrix:
    """Barycentric interpolation from coarse to fine vertices."""
    n_fine = len(fine_positions)
    n_coarse = len(kept)
    coarse_of = {int(v): k for k, v in enumerate(kept)}
    rows, cols, vals = [], [], []
    faces = coarse_topology.faces
    tri_pts = coarse_positions[faces]  # (F, 3, 3)
    for i in range(n_fine):
        if i in coarse_of:
            rows.append(i)
            cols.append(coarse_of[i])
            vals.append(1.0)
            continue
        p = fine_positions[i]
        best = (np.inf, None, None)
        for f in range(len(faces)):
            w, dist = _closest_point_barycentric(p, tri_pts[f])
            if dist < best[0] - 1e-12:
                best = (dist, f, w)
        _, f, w = best
        if f is None:
            raise MeshError("coarse mesh has no faces; cannot build up-matrix")
        for corner in range(3):
            if w[corner] > 0:
                rows.append(i)
                cols.append(int(faces[f, corner]))
                vals.append(float(w[corner]))
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_fine, n_coarse))


def build_sampling_hierarchy(
    topology: TriangleTopology,
    reference_positions: np.ndarray,
    factor: int,
    levels: int,
) -> SamplingHierarchy:
    """Build `levels` rounds of factor-`factor` coarsening from a reference mesh."""
    if factor < 2:
        raise MeshError(f"sampling factor must be >= 2, got {factor}")
    if levels < 1:
        raise MeshError(f"levels must be >= 1, got {levels}")
    SurfaceMesh(topology, reference_positions)  # validates shape/finiteness

    topologies = [topology]
    references = [np.asarray(reference_positions, dtype=np.float64)]
    downs, ups, laplacians = [], [], [scaled_laplacian(topology)]
    for _ in range(levels):
        fine_topo, fine_pos = topologies[-1], references[-1]
        target = max(4, int(round(fine_topo.n_vertices / factor)))
        coarse_topo, kept, _ = decimate(fine_topo, fine_pos, target)
        coarse_pos = fine_pos[kept]
        down = sp.csr_matrix(
            (np.ones(len(kept)), (np.arange(len(kept)), kept)),
            shape=(len(kept), fine_topo.n_vertices),
        )
        up = _up_matrix(fine_pos, kept, coarse_topo, coarse_pos)
        topologies.append(coarse_topo)
        references.append(coarse_pos)
        downs.append(down)
        ups.append(up)
        laplacians.append(scaled_laplacian(coarse_topo))
    return SamplingHierarchy(topologies, references, downs, ups, laplacians)


# ---------------------------------------------------------------------------
# Manifest persistence (JSON metadata + sparse-triplet text files)
# ---------------------------------------------------------------------------


def _write_triplets(mat: sp.spmatrix, path: Path) -> None:
    coo = sp.coo_matrix(mat)
    with open(path, "w") as fh:
        fh.write(f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {float(v)!r}\n")


def _read_triplets(path: Path) -> sp.csr_matrix:
    with open(path) as fh:
        rows_n, cols_n, nnz = (int(t) for t in fh.readline().split())
        rows, cols, vals = [], [], []
        for _ in range(nnz):
            r, c, v = fh.readline().split()
            rows.append(int(r))
            cols.append(int(c))
            vals.append(float(v))
    return sp.csr_matrix((vals, (rows, cols)), shape=(rows_n, cols_n))


def save_hierarchy(hierarchy: SamplingHierarchy, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "vertex_counts": hierarchy.vertex_counts(),
        "n_levels": hierarchy.n_levels,
    }
    for k, topo in enumerate(hierarchy.topologies):
        np.savetxt(directory / f"faces_{k}.txt", topo.faces, fmt="%d")
        np.savetxt(directory / f"reference_{k}.txt", hierarchy.reference_positions[k])
        _write_triplets(hierarchy.laplacians[k], directory / f"laplacian_{k}.txt")
    for k in range(hierarchy.n_levels):
        _write_triplets(hierarchy.downs[k], directory / f"down_{k}.txt")
        _write_triplets(hierarchy.ups[k], directory / f"up_{k}.txt")
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_hierarchy(directory) -> SamplingHierarchy:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    counts = manifest["vertex_counts"]
    n_levels = manifest["n_levels"]
    topologies, references, laplacians = [], [], []
    for k, n in enumerate(counts):
        faces = np.loadtxt(directory / f"faces_{k}.txt", dtype=np.int64).reshape(-1, 3)
        topologies.append(TriangleTopology(n, faces))
        references.append(np.loadtxt(directory / f"reference_{k}.txt").reshape(n, 3))
        laplacians.append(_read_triplets(directory / f"laplacian_{k}.txt"))
    downs = [_read_triplets(directory / f"down_{k}.txt") for k in range(n_levels)]
    ups = [_read_triplets(directory / f"up_{k}.txt") for k in range(n_levels)]
    return SamplingHierarchy(topologies, references, downs, ups, laplacians)
