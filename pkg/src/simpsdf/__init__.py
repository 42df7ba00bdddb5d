"""Smooth signed-distance geometry from SIMP density fields."""
from .mesh import ElementType, UnstructuredMesh, structured_hex_mesh
from .nodal_map import map_densities
from .sdf import CartesianGrid, SdfField, build_grid, build_sdf
from .rbf import fit_rbf, smooth_sdf, volume_shift
from .geometry import TriangleSurface, fe_isocontour_volume, grid_isocontour_volume, marching_cubes

__version__ = "0.1.0"

__all__ = [
    "CartesianGrid",
    "ElementType",
    "SdfField",
    "TriangleSurface",
    "UnstructuredMesh",
    "build_grid",
    "build_sdf",
    "fe_isocontour_volume",
    "fit_rbf",
    "grid_isocontour_volume",
    "map_densities",
    "marching_cubes",
    "smooth_sdf",
    "structured_hex_mesh",
    "volume_shift",
]
