"""Conditional flow VAE for controllable synthesis of virtual anatomical populations."""

from .mesh import (
    MeshError,
    SurfaceMesh,
    TriangleTopology,
    enclosed_volume,
    load_mesh,
    mean_vertex_distance,
    merge_meshes,
    myocardial_volume,
    save_mesh,
    scaled_laplacian,
)
from .solids import make_cube, make_icosphere

__all__ = [
    "MeshError",
    "SurfaceMesh",
    "TriangleTopology",
    "enclosed_volume",
    "load_mesh",
    "mean_vertex_distance",
    "merge_meshes",
    "myocardial_volume",
    "save_mesh",
    "scaled_laplacian",
    "make_cube",
    "make_icosphere",
]

__version__ = "0.1.0"
