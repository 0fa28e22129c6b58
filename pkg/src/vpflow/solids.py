"""Closed test solids with consistent outward orientation."""

from __future__ import annotations

import numpy as np

from .mesh import SurfaceMesh, TriangleTopology

# Unit cube centred at the origin, CCW-outward winding.
_CUBE_VERTICES = np.array(
    [
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, 1],
        [1, -1, 1],
        [1, 1, 1],
        [-1, 1, 1],
    ],
    dtype=np.float64,
) * 0.5

_CUBE_FACES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # bottom (z = -1/2)
        [4, 5, 6], [4, 6, 7],  # top
        [0, 1, 5], [0, 5, 4],  # front (y = -1/2)
        [2, 3, 7], [2, 7, 6],  # back
        [1, 2, 6], [1, 6, 5],  # right (x = +1/2)
        [3, 0, 4], [3, 4, 7],  # left
    ],
    dtype=np.int64,
)


def make_cube(side: float = 1.0) -> SurfaceMesh:
    """Axis-aligned cube of the given side length, centred at the origin."""
    return SurfaceMesh(TriangleTopology(8, _CUBE_FACES), _CUBE_VERTICES * float(side))


def make_icosphere(radius: float = 1.0, subdivisions: int = 0) -> SurfaceMesh:
    """Icosahedron subdivided `subdivisions` times, vertices projected to the sphere."""
    if subdivisions > 6:
        raise ValueError("subdivisions > 6 not supported")
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)

    for _ in range(subdivisions):
        midpoint_cache: dict[tuple[int, int], int] = {}
        new_verts = list(verts)
        new_faces = []

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in midpoint_cache:
                m = new_verts[a] + new_verts[b]
                m /= np.linalg.norm(m)
                midpoint_cache[key] = len(new_verts)
                new_verts.append(m)
            return midpoint_cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(new_verts)
        faces = np.array(new_faces, dtype=np.int64)

    return SurfaceMesh(TriangleTopology(len(verts), faces), verts * float(radius))
