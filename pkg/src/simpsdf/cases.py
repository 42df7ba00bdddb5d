"""Reference configurations shared by the tests, scripts and CLI."""
from __future__ import annotations

import numpy as np

from .mesh import structured_hex_mesh

SPHERE_RADIUS = 0.5


def sphere_volume(r: float = SPHERE_RADIUS) -> float:
    return 4.0 / 3.0 * np.pi * r**3


def sphere_mesh(n: int, r: float = SPHERE_RADIUS):
    """``n^3`` hex mesh of the cube ``[-1, 1]^3`` and the exact sphere SDF at its nodes."""
    mesh = structured_hex_mesh((n, n, n), (2.0, 2.0, 2.0), origin=(-1.0, -1.0, -1.0))
    phi = r - np.linalg.norm(mesh.nodes, axis=1)
    return mesh, phi


def sphere_density(n: int, r: float = SPHERE_RADIUS, rho_t: float = 0.5):
    """Sphere encoded as a nodal density whose ``rho_t`` level is the sphere."""
    mesh, phi = sphere_mesh(n, r)
    return mesh, np.clip(rho_t + phi, 0.0, 1.0)


def sphere_grid_sdf(n: int, r: float = SPHERE_RADIUS):
    """Exact sphere SDF sampled on an ``(n+1)^3`` grid over ``[-1, 1]^3``."""
    from .sdf import CartesianGrid, SdfField

    x = np.linspace(-1.0, 1.0, n + 1)
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    return SdfField(CartesianGrid((-1.0, -1.0, -1.0), 2.0 / n, X.shape), r - np.sqrt(X**2 + Y**2 + Z**2))


ROOF_H = 0.1


def roof_case():
    """Two unit hexes along ``x`` whose ``0.5`` isocontour is a roof with ridge at ``x = 1``.

    Bottom nodes carry density 1, the top nodes on the shared face 0.5 and the
    remaining top nodes 0, so the contour rises from ``z = 0.5`` at the gable
    ends to the ridge on the top face.
    """
    mesh = structured_hex_mesh((2, 1, 1), (2.0, 1.0, 1.0))
    x = mesh.nodes
    rho = np.where(x[:, 2] < 0.5, 1.0, np.where(np.isclose(x[:, 0], 1.0), 0.5, 0.0))
    return mesh, rho
