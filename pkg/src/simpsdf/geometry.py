"""Isocontour volumes, threshold calibration and surface extraction.

Volumes are computed exactly for piecewise-linear fields: every hexahedron
(FE element or grid cell) is split into six tetrahedra along the main
diagonal, and the sub-volume where a linear field is non-negative is
evaluated in closed form per tetrahedron.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .mesh import HEX8_TETS, ElementType, UnstructuredMesh

_REF_TET = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def _det3(p0, p1, p2, p3):
    return np.einsum("...i,...i->...", p1 - p0, np.cross(p2 - p0, p3 - p0))


def tet_positive_fraction(v) -> np.ndarray:
    """Fraction of a tetrahedron where the linear interpolant of ``v (..., 4)`` is ``>= 0``.

    One positive vertex gives a corner tet with fraction ``prod v_a / (v_a - v_b)``;
    three positive vertices give the complement of the same formula at the
    negative vertex; the 2-2 case is a wedge cut into three tetrahedra.
    """
    v = np.asarray(v, dtype=float)
    shape = v.shape[:-1]
    v = v.reshape(-1, 4)
    pos = v >= 0
    npos = pos.sum(axis=1)
    out = np.zeros(len(v))
    out[npos == 4] = 1.0
    for k in (1, 3):
        m = np.flatnonzero(npos == k)
        if m.size == 0:
            continue
        vv = v[m]
        lone = np.argmax(pos[m] if k == 1 else ~pos[m], axis=1)
        va = vv[np.arange(m.size), lone]
        prod = np.ones(m.size)
        for j in range(4):
            other = j != lone
            den = np.where(other, va - vv[:, j], 1.0)
            prod = np.where(other, prod * va / den, prod)
        out[m] = prod if k == 1 else 1.0 - prod
    m = np.flatnonzero(npos == 2)
    if m.size:
        vv = v[m]
        order = np.argsort(~pos[m], axis=1, kind="stable")
        a, b, c, d = (np.take_along_axis(vv, order[:, [i]], 1)[:, 0] for i in range(4))
        A, B, C, D = (np.broadcast_to(p, (m.size, 3)) for p in _REF_TET)

        def cut(p, q, vp, vq):
            return p + (vp / (vp - vq))[:, None] * (q - p)

        Pac, Pad, Pbc, Pbd = cut(A, C, a, c), cut(A, D, a, d), cut(B, C, b, c), cut(B, D, b, d)
        out[m] = (
            np.abs(_det3(A, Pac, Pad, Pbd))
            + np.abs(_det3(A, Pac, Pbc, Pbd))
            + np.abs(_det3(A, B, Pbc, Pbd))
        )
    return np.clip(out, 0.0, 1.0).reshape(shape)


def fe_isocontour_volume(mesh: UnstructuredMesh, nodal_rho, rho_t: float) -> float:
    """Volume of ``{rho >= rho_t}`` with hexahedra split into six linear tetrahedra."""
    rho = np.asarray(nodal_rho, dtype=float)
    if rho.shape != (mesh.n_nodes,):
        raise ValueError("nodal field does not match mesh")
    total = 0.0
    for et, _, conn in mesh.blocks():
        tets = HEX8_TETS if et is ElementType.HEX8 else ((0, 1, 2, 3),)
        for t in tets:
            nodes = conn[:, list(t)]
            x = mesh.nodes[nodes]
            vol = np.abs(_det3(x[:, 0], x[:, 1], x[:, 2], x[:, 3])) / 6.0
            total += float(np.sum(vol * tet_positive_fraction(rho[nodes] - rho_t)))
    return total


# hex corner offsets in the same vertex order as ElementType.HEX8
_CELL_OFFSETS = ((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1))


def _field(sdf_or_values, spacing=None):
    if hasattr(sdf_or_values, "grid"):
        return np.asarray(sdf_or_values.values, dtype=float), sdf_or_values.grid.spacing
    if spacing is None:
        raise ValueError("spacing is required for raw arrays")
    return np.asarray(sdf_or_values, dtype=float), float(spacing)


def grid_isocontour_volume(sdf_or_values, level: float = 0.0, spacing: float | None = None) -> float:
    """Volume of ``{phi >= level}`` on a regular grid (cells split like FE hexahedra)."""
    phi, h = _field(sdf_or_values, spacing)
    if phi.ndim != 3 or min(phi.shape) < 2:
        raise ValueError("need a 3D grid with at least 2 nodes per axis")
    v = phi - level
    nx, ny, nz = (n - 1 for n in phi.shape)
    cell = h**3
    total = 0.0
    # slabs along x keep peak memory bounded on large grids
    step = max(1, int(2_000_000 // max(ny * nz, 1)))
    for i0 in range(0, nx, step):
        i1 = min(nx, i0 + step)
        corners = [v[i0 + a : i1 + a, b : ny + b, c : nz + c] for a, b, c in _CELL_OFFSETS]
        full = np.all([cc >= 0 for cc in corners], axis=0)
        empty = np.all([cc < 0 for cc in corners], axis=0)
        total += float(full.sum()) * cell
        mixed = ~(full | empty)
        if not mixed.any():
            continue
        cv = np.stack([cc[mixed] for cc in corners], axis=-1)
        for t in HEX8_TETS:
            total += float(tet_positive_fraction(cv[:, list(t)]).sum()) * cell / 6.0
    return total


def calibrate_threshold(mesh: UnstructuredMesh, nodal_rho, v_target: float, tol: float = 1e-3, max_iter: int = 200) -> float:
    """Threshold whose FE isocontour volume matches ``v_target`` (bisection)."""
    rho = np.asarray(nodal_rho, dtype=float)
    lo, hi = float(rho.min()), float(rho.max())
    v_lo = fe_isocontour_volume(mesh, rho, lo)
    v_hi = fe_isocontour_volume(mesh, rho, hi)
    if not v_target > 0 or v_target > v_lo * (1 + tol) or v_target < v_hi * (1 - tol):
        raise ValueError(f"target volume {v_target:g} outside attainable range [{v_hi:g}, {v_lo:g}]")
    if abs(v_lo - v_target) <= tol * v_target:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        vm = fe_isocontour_volume(mesh, rho, mid)
        if abs(vm - v_target) <= tol * v_target * 1e-3 or hi - lo < 1e-14:
            return mid
        if vm > v_target:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    if abs(fe_isocontour_volume(mesh, rho, mid) - v_target) > tol * v_target:
        raise RuntimeError("threshold calibration did not converge")
    return mid


@dataclass
class TriangleSurface:
    vertices: np.ndarray
    triangles: np.ndarray
    open_boundary: bool = False
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def normals(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        L = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(L > 0, L, 1.0)

    @property
    def area(self) -> float:
        p = self.vertices[self.triangles]
        return 0.5 * float(np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1).sum())

    def enclosed_volume(self) -> float:
        """Signed volume by the divergence theorem (positive for outward normals)."""
        p = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)

    def is_watertight(self) -> bool:
        if self.n_triangles == 0:
            return False
        t = self.triangles
        edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(np.all(counts == 2))


def _points_up_gradient(surf: TriangleSurface, phi, grid) -> bool:
    """Whether the (consistently wound) triangles face toward increasing ``phi``.

    Decided by the area-weighted agreement of the face normals with the
    central-difference gradient at the nearest grid node.
    """
    p = surf.vertices[surf.triangles]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    idx = np.clip(np.rint((p.mean(axis=1) - np.asarray(grid.origin)) / grid.spacing).astype(int), 0, np.array(phi.shape) - 1)
    grad = np.stack([g[tuple(idx.T)] for g in np.gradient(phi)], axis=1)
    return float(np.einsum("ij,ij->", n, grad)) > 0


def marching_cubes(sdf, level: float = 0.0) -> TriangleSurface:
    """Triangulate ``{phi = level}`` with outward normals (toward decreasing ``phi``).

    The level set is open where it reaches the grid boundary; the surface is
    still returned with ``open_boundary`` set and a warning.
    """
    from skimage import measure

    phi = np.asarray(sdf.values, dtype=float)
    lo, hi = float(phi.min()), float(phi.max())
    if not lo <= level <= hi:
        raise ValueError(f"level {level:g} outside field range [{lo:g}, {hi:g}]")
    if lo == hi:
        return TriangleSurface(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    h = sdf.grid.spacing
    verts, faces, _, _ = measure.marching_cubes(phi, level=level, spacing=(h, h, h), method="lewiner", allow_degenerate=False)
    verts = verts + np.asarray(sdf.grid.origin)
    surf = TriangleSurface(verts, faces)
    if surf.n_triangles and _points_up_gradient(surf, phi, sdf.grid):
        surf.triangles = surf.triangles[:, ::-1].copy()
    shell = np.concatenate(
        [phi[[0, -1]].ravel(), phi[:, [0, -1]].ravel(), phi[:, :, [0, -1]].ravel()]
    )
    if shell.min() < level <= shell.max():
        surf.open_boundary = True
        warnings.warn("level set touches the grid boundary; surface is open", RuntimeWarning, stacklevel=2)
    return surf
