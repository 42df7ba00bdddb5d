"""Discrete signed distance field of a nodal-density isocontour on a Cartesian grid.

The material boundary is the set where the interpolated nodal density equals
``rho_t`` together with exterior element faces on which the density is at
least ``rho_t``. Distances come from three kinds of contributions:

* isocontour projections inside partially solid elements (box-constrained SQP
  for HEX8, exact planar polygon for TET4),
* exterior faces of fully solid elements (4-triangle fan per quad face),
* exterior faces of partially solid elements, kept only where the projected
  point is solid.

Only grid nodes inside an element's bounding box expanded by ``2h`` receive
that element's contributions; the resulting unsigned distances are min-reduced
per node, clamped to a band, and signed by point location in the mesh.
"""
from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import mesh as fem
from .mesh import ElementType, UnstructuredMesh
from .nlp import Status, minimize_batch

CHUNK_PAIRS = 20000


@dataclass(frozen=True)
class CartesianGrid:
    origin: tuple
    spacing: float
    shape: tuple

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def axis(self, i: int) -> np.ndarray:
        return self.origin[i] + self.spacing * np.arange(self.shape[i])

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.spacing * (np.asarray(self.shape) - 1)

    @property
    def volume(self) -> float:
        return float(np.prod((np.asarray(self.shape) - 1) * self.spacing))

    def points(self, flat_ids=None) -> np.ndarray:
        """Node coordinates in C order (``k`` fastest)."""
        if flat_ids is None:
            flat_ids = np.arange(self.n_nodes)
        ijk = np.column_stack(np.unravel_index(flat_ids, self.shape))
        return np.asarray(self.origin) + self.spacing * ijk

    def index_box(self, lo, hi) -> tuple[np.ndarray, np.ndarray]:
        """Inclusive index ranges of the nodes inside ``[lo, hi]``; empty where ``hi < lo``."""
        o = np.asarray(self.origin)
        eps = 1e-9
        i0 = np.ceil((np.asarray(lo) - o) / self.spacing - eps).astype(np.int64)
        i1 = np.floor((np.asarray(hi) - o) / self.spacing + eps).astype(np.int64)
        n = np.asarray(self.shape) - 1
        return np.maximum(i0, 0), np.minimum(i1, n)

    def nodes_in_box(self, lo, hi) -> np.ndarray:
        i0, i1 = self.index_box(lo, hi)
        if np.any(i1 < i0):
            return np.zeros(0, dtype=np.int64)
        r = [np.arange(a, b + 1) for a, b in zip(i0, i1)]
        I, J, K = np.meshgrid(*r, indexing="ij")
        return np.ravel_multi_index((I.ravel(), J.ravel(), K.ravel()), self.shape)

    def refined(self, factor: int) -> "CartesianGrid":
        factor = int(factor)
        if factor < 1:
            raise ValueError("refinement factor must be >= 1")
        shape = tuple((n - 1) * factor + 1 for n in self.shape)
        return CartesianGrid(self.origin, self.spacing / factor, shape)


@dataclass
class SdfField:
    grid: CartesianGrid
    values: np.ndarray
    band: float = np.inf
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)


class ElementClass(enum.IntEnum):
    VOID = 0
    INTERIOR_SOLID = 1
    ISOCONTOUR = 2
    SOLID_BOUNDARY = 3
    TRANSITIONAL_BOUNDARY = 4


@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise ValueError("AABB min exceeds max")

    def expanded(self, d: float) -> "Aabb":
        return Aabb(np.asarray(self.lo) - d, np.asarray(self.hi) + d)

    def contains(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)


def build_grid(mesh: UnstructuredMesh, h: float | None = None, overlap: int = 3) -> CartesianGrid:
    """Grid covering the mesh bounding box plus ``overlap * h`` on every side.

    ``h`` defaults to the shortest element edge of the mesh.
    """
    if mesh.n_nodes == 0 or mesh.n_elements == 0:
        raise ValueError("empty mesh")
    if h is None:
        h = mesh.shortest_edge()
    if not h > 0:
        raise ValueError("grid spacing must be positive")
    lo, hi = mesh.bounding_box
    span = hi - lo + 2 * overlap * h
    counts = np.ceil(span / h - 1e-9).astype(int) + 1
    return CartesianGrid(tuple(lo - overlap * h), float(h), tuple(counts))


def _nodal(mesh, nodal_rho):
    rho = np.asarray(nodal_rho, dtype=float)
    if rho.shape != (mesh.n_nodes,):
        raise ValueError(f"expected {mesh.n_nodes} nodal densities, got shape {rho.shape}")
    return rho


def classify_elements(mesh: UnstructuredMesh, nodal_rho, rho_t: float, faces=None):
    """Per-element :class:`ElementClass` and a map element -> exterior faces.

    Nodal values equal to ``rho_t`` count as solid.
    """
    if not 0.0 < rho_t < 1.0:
        raise ValueError("threshold must lie strictly between 0 and 1")
    rho = _nodal(mesh, nodal_rho)
    if faces is None:
        faces = mesh.boundary_faces()
    ext: dict[int, list] = {}
    for f in faces:
        ext.setdefault(f.element, []).append(f)
    n_solid = np.zeros(mesh.n_elements, dtype=np.int64)
    n_en = np.zeros(mesh.n_elements, dtype=np.int64)
    for et, ids, conn in mesh.blocks():
        n_solid[ids] = np.sum(rho[conn] >= rho_t, axis=1)
        n_en[ids] = et.n_nodes
    has_ext = np.zeros(mesh.n_elements, dtype=bool)
    has_ext[list(ext)] = True
    cls = np.full(mesh.n_elements, ElementClass.VOID, dtype=np.int8)
    solid = n_solid == n_en
    straddle = (n_solid > 0) & ~solid
    cls[solid & ~has_ext] = ElementClass.INTERIOR_SOLID
    cls[solid & has_ext] = ElementClass.SOLID_BOUNDARY
    cls[straddle & ~has_ext] = ElementClass.ISOCONTOUR
    cls[straddle & has_ext] = ElementClass.TRANSITIONAL_BOUNDARY
    return cls, ext


# ---------------------------------------------------------------- triangles


def distance_to_triangles(x, t0, t1, t2):
    """Closest points on triangles, batched over the leading axis.

    Returns ``(d, xp, lam)`` with barycentric ``lam`` of ``xp``. Degenerate
    triangles are tolerated (their edges are still searched).
    """
    x, t0, t1, t2 = (np.asarray(v, dtype=float) for v in (x, t0, t1, t2))
    e0 = t1 - t0
    e1 = t2 - t0
    v = x - t0
    d00 = np.sum(e0 * e0, axis=-1)
    d01 = np.sum(e0 * e1, axis=-1)
    d11 = np.sum(e1 * e1, axis=-1)
    d20 = np.sum(v * e0, axis=-1)
    d21 = np.sum(v * e1, axis=-1)
    den = d00 * d11 - d01 * d01
    good = den > 1e-28 * (d00 + d11) ** 2 + 1e-300
    sden = np.where(good, den, 1.0)
    l1 = (d11 * d20 - d01 * d21) / sden
    l2 = (d00 * d21 - d01 * d20) / sden
    l0 = 1.0 - l1 - l2
    lam = np.stack([l0, l1, l2], axis=-1)
    inside = good & (np.min(lam, axis=-1) >= 0.0)
    xp = l0[..., None] * t0 + l1[..., None] * t1 + l2[..., None] * t2
    best = np.where(inside, np.linalg.norm(x - xp, axis=-1), np.inf)
    best_xp = np.where(inside[..., None], xp, 0.0)
    best_lam = np.where(inside[..., None], lam, 0.0)
    verts = (t0, t1, t2)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        a, b = verts[i], verts[j]
        ab = b - a
        L2 = np.sum(ab * ab, axis=-1)
        t = np.clip(np.sum((x - a) * ab, axis=-1) / np.where(L2 > 0, L2, 1.0), 0.0, 1.0)
        q = a + t[..., None] * ab
        d = np.linalg.norm(x - q, axis=-1)
        better = ~inside & (d < best)
        best = np.where(better, d, best)
        best_xp = np.where(better[..., None], q, best_xp)
        lq = np.zeros(lam.shape)
        lq[..., i] = 1.0 - t
        lq[..., j] = t
        best_lam = np.where(better[..., None], lq, best_lam)
    return best, best_xp, best_lam


def distance_to_triangle(x_g, triangle):
    """Distance from a point to a closed triangle ``(3, 3)``: ``(d, x_p, lam)``.

    ``min(lam) >= 0`` always holds for the returned closest point; the
    projection is interior when all three are positive.
    """
    tri = np.asarray(triangle, dtype=float)
    scale = max(float(np.ptp(tri, axis=0).max()), 1e-300)
    area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    if not area > 1e-14 * scale**2:
        raise ValueError("degenerate triangle")
    d, xp, lam = distance_to_triangles(np.asarray(x_g, dtype=float)[None], tri[None, 0], tri[None, 1], tri[None, 2])
    return float(d[0]), xp[0], lam[0]


# ------------------------------------------------------ isocontour projection

_FACE_STARTS = np.vstack([np.zeros(3), np.eye(3), -np.eye(3)])


def _coarse_crossings(coords, rho, rho_t, k: int = 5):
    """Exact isocontour points on the edges of a ``k^3`` local lattice per element.

    The trilinear field is linear along lattice edges, so linear interpolation
    of the crossing is exact. Returns ``(xi, x, mask)`` of shape ``(E, M, .)``.
    """
    t = np.linspace(-1.0, 1.0, k)
    lat = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1)
    N = fem.shape_values(ElementType.HEX8, lat)
    vals = np.einsum("ijka,ea->eijk", N, rho) - rho_t
    xis, masks = [], []
    for ax in range(3):
        sl0 = [slice(None)] * 3
        sl1 = [slice(None)] * 3
        sl0[ax] = slice(0, k - 1)
        sl1[ax] = slice(1, k)
        v0 = vals[(slice(None),) + tuple(sl0)]
        v1 = vals[(slice(None),) + tuple(sl1)]
        cross = (v0 >= 0) != (v1 >= 0)
        den = np.where(cross, v0 - v1, 1.0)
        s = np.where(cross, v0 / den, 0.0)
        p0 = lat[tuple(sl0)]
        step = np.zeros(3)
        step[ax] = t[1] - t[0]
        xi = p0[None] + s[..., None] * step
        xis.append(xi.reshape(len(rho), -1, 3))
        masks.append(cross.reshape(len(rho), -1))
    xi = np.concatenate(xis, axis=1)
    mask = np.concatenate(masks, axis=1)
    x = np.einsum("ema,eak->emk", fem.shape_values(ElementType.HEX8, xi), coords)
    return xi, x, mask


def _hex_projection_problem(coords, rho, xg, rho_t):
    """Callables for min |x(xi) - x_g|^2 / L^2  s.t.  rho(xi) = rho_t on [-1, 1]^3."""
    L2 = fem.element_diameter(coords) ** 2
    d2x = None

    def geom(xi, rows):
        N = fem.shape_values(ElementType.HEX8, xi)
        dN = fem.shape_gradients(ElementType.HEX8, xi)
        c_ = coords[rows]
        x = np.einsum("ba,bak->bk", N, c_)
        J = np.einsum("bai,bak->bki", dN, c_)
        return N, dN, x, J

    def objective(xi, rows):
        _, _, x, J = geom(xi, rows)
        r = x - xg[rows]
        f = np.sum(r * r, axis=1) / L2[rows]
        g = 2.0 * np.einsum("bki,bk->bi", J, r) / L2[rows, None]
        return f, g

    def constraint(xi, rows):
        N = fem.shape_values(ElementType.HEX8, xi)
        dN = fem.shape_gradients(ElementType.HEX8, xi)
        c = np.einsum("ba,ba->b", N, rho[rows]) - rho_t
        a = np.einsum("bai,ba->bi", dN, rho[rows])
        return c, a

    def hessian(xi, lam, rows):
        _, _, x, J = geom(xi, rows)
        d2N = fem.shape_hessians(ElementType.HEX8, xi)
        r = x - xg[rows]
        X2 = np.einsum("baij,bak->bkij", d2N, coords[rows])
        Hf = 2.0 * (np.einsum("bki,bkj->bij", J, J) + np.einsum("bk,bkij->bij", r, X2)) / L2[rows, None, None]
        Hc = np.einsum("baij,ba->bij", d2N, rho[rows])
        return Hf + lam[:, None, None] * Hc

    return objective, constraint, hessian


def _solve_hex(coords, rho, xg, rho_t, xi0, max_iter=60):
    obj, con, hess = _hex_projection_problem(coords, rho, xg, rho_t)
    res = minimize_batch(obj, con, -np.ones(3), np.ones(3), xi0, hessian=hess, max_iter=max_iter)
    xi = res.x
    x = np.einsum("ba,bak->bk", fem.shape_values(ElementType.HEX8, xi), coords)
    d = np.linalg.norm(x - xg, axis=1)
    c = np.einsum("ba,ba->b", fem.shape_values(ElementType.HEX8, xi), rho) - rho_t
    ok = (res.status == Status.CONVERGED) & (np.abs(c) <= 1e-8)
    return d, xi, ok


def _hex_isocontour(coords_e, rho_e, pair_elem, xg, rho_t):
    """Batched isocontour distance for HEX8 pairs (element data indexed by ``pair_elem``)."""
    nb = xg.shape[0]
    cxi, cx, cmask = _coarse_crossings(coords_e, rho_e, rho_t)
    d2 = np.sum((cx[pair_elem] - xg[:, None, :]) ** 2, axis=-1)
    d2 = np.where(cmask[pair_elem], d2, np.inf)
    j = np.argmin(d2, axis=1)
    has = np.isfinite(d2[np.arange(nb), j])
    seed = np.where(has[:, None], cxi[pair_elem, j], 0.0)
    coords = coords_e[pair_elem]
    rho = rho_e[pair_elem]
    d, xi, ok = _solve_hex(coords, rho, xg, rho_t, seed)
    d = np.where(ok, d, np.inf)
    # the nearest lattice crossing may lie in the basin of a local minimum on
    # an element edge, so the centroid start is always tried as well
    d2_, xi2, ok2 = _solve_hex(coords, rho, xg, rho_t, np.zeros_like(seed))
    better = ok2 & (d2_ < d)
    d[better] = d2_[better]
    xi[better] = xi2[better]
    ok |= ok2
    # fallback multi-start from the six face centres, keeping the best
    # converged projection
    for start in _FACE_STARTS[1:]:
        redo = np.flatnonzero(~ok)
        if redo.size == 0:
            break
        d2_, xi2, ok2 = _solve_hex(coords[redo], rho[redo], xg[redo], rho_t, np.tile(start, (redo.size, 1)))
        better = ok2 & (d2_ < d[redo])
        d[redo[better]] = d2_[better]
        xi[redo[better]] = xi2[better]
        ok[redo[ok2]] = True
    return d, xi, ok


_TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


def _tet_polygons(coords_e, rho_e, rho_t):
    """Isocontour polygon of the linear field in each tet as two triangles ``(E, 2, 3, 3)``."""
    ne = coords_e.shape[0]
    v = rho_e - rho_t
    pos = v >= 0
    tris = np.zeros((ne, 2, 3, 3))
    ok = np.zeros(ne, dtype=bool)
    npos = pos.sum(axis=1)
    for e in range(ne):
        if npos[e] in (0, 4):
            continue
        P = {}
        for a, b in _TET_EDGES:
            if pos[e, a] != pos[e, b]:
                t = v[e, a] / (v[e, a] - v[e, b])
                P[(a, b)] = coords_e[e, a] + t * (coords_e[e, b] - coords_e[e, a])
        key = lambda a, b: P[(min(a, b), max(a, b))]
        if npos[e] in (1, 3):
            lone = int(np.flatnonzero(pos[e] if npos[e] == 1 else ~pos[e])[0])
            others = [i for i in range(4) if i != lone]
            tri = [key(lone, o) for o in others]
            tris[e, 0] = tri
            tris[e, 1] = tri
        else:
            a, b = np.flatnonzero(pos[e])
            c, d = np.flatnonzero(~pos[e])
            quad = [key(a, c), key(a, d), key(b, d), key(b, c)]
            tris[e, 0] = [quad[0], quad[1], quad[2]]
            tris[e, 1] = [quad[0], quad[2], quad[3]]
        ok[e] = True
    return tris, ok


def _tet_isocontour(coords_e, rho_e, pair_elem, xg, rho_t):
    tris, has = _tet_polygons(coords_e, rho_e, rho_t)
    T = tris[pair_elem]
    d = np.full(xg.shape[0], np.inf)
    xp = np.zeros_like(xg)
    for k in range(2):
        dk, xk, _ = distance_to_triangles(xg, T[:, k, 0], T[:, k, 1], T[:, k, 2])
        better = dk < d
        d = np.where(better, dk, d)
        xp = np.where(better[:, None], xk, xp)
    ok = has[pair_elem]
    c = coords_e[pair_elem]
    Jt = np.swapaxes(c[:, 1:] - c[:, :1], 1, 2)
    xi = np.linalg.solve(Jt, (xp - c[:, 0])[..., None])[..., 0]
    xi = np.clip(xi, 0.0, 1.0)
    return np.where(ok, d, np.inf), xi, ok


def distance_to_isocontour_batch(etype, coords, nodal_rho, x_g, rho_t, pair_elem=None):
    """Vectorised :func:`distance_to_isocontour`.

    ``coords`` ``(E, n_en, 3)`` and ``nodal_rho`` ``(E, n_en)`` describe the
    elements; ``pair_elem`` maps each of the ``B`` query points to its element
    (defaults to one element per point). Returns ``(d, xi, ok)``; ``d`` is
    ``inf`` where no projection was found.
    """
    etype = fem.element_type(etype)
    coords = np.asarray(coords, dtype=float)
    rho = np.asarray(nodal_rho, dtype=float)
    xg = np.atleast_2d(np.asarray(x_g, dtype=float))
    if pair_elem is None:
        pair_elem = np.arange(xg.shape[0])
    pair_elem = np.asarray(pair_elem, dtype=np.int64)
    if etype is ElementType.HEX8:
        return _hex_isocontour(coords, rho, pair_elem, xg, rho_t)
    return _tet_isocontour(coords, rho, pair_elem, xg, rho_t)


def distance_to_isocontour(etype, coords, nodal_rho, x_g, rho_t):
    """Shortest distance from ``x_g`` to ``{rho(xi) = rho_t}`` inside one element.

    Returns ``(d, xi)`` or ``None`` when the element has no isocontour or the
    minimiser failed from every start.
    """
    d, xi, ok = distance_to_isocontour_batch(
        etype, np.asarray(coords, dtype=float)[None], np.asarray(nodal_rho, dtype=float)[None], x_g, rho_t
    )
    if not ok[0]:
        return None
    return float(d[0]), xi[0]


# ------------------------------------------------------------- exterior faces


_QUAD_ST = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def _bilinear(st):
    s, t = st[..., 0], st[..., 1]
    return 0.25 * (1 + s[..., None] * _QUAD_ST[:, 0]) * (1 + t[..., None] * _QUAD_ST[:, 1])


def _bilinear_grad(st):
    s, t = st[..., 0], st[..., 1]
    gs = 0.25 * _QUAD_ST[:, 0] * (1 + t[..., None] * _QUAD_ST[:, 1])
    gt = 0.25 * _QUAD_ST[:, 1] * (1 + s[..., None] * _QUAD_ST[:, 0])
    return np.stack([gs, gt], axis=-1)


def face_triangles(etype, coords, local_face):
    """Triangle fan of one exterior face.

    Quad faces are split into 4 triangles meeting at the bilinear centre,
    tri faces are used as is. Returns ``(tris (m, 3, 3), local (m, 3, 2))``
    where ``local`` holds face-local coordinates of the triangle vertices.
    """
    etype = fem.element_type(etype)
    face = fem.reference_faces(etype)[local_face]
    pts = np.asarray(coords, dtype=float)[list(face)]
    if len(face) == 3:
        st = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        return pts[None], st[None]
    centre = pts.mean(axis=0)
    tris = np.array([[pts[i], pts[(i + 1) % 4], centre] for i in range(4)])
    local = np.array([[_QUAD_ST[i], _QUAD_ST[(i + 1) % 4], [0.0, 0.0]] for i in range(4)])
    return tris, local


def _face_xi(etype, local_face, st):
    """Element local coordinates of face-local points."""
    face = list(fem.reference_faces(etype)[local_face])
    ref = fem.reference_vertices(etype)[face]
    if len(face) == 3:
        s, t = st[..., 0], st[..., 1]
        w = np.stack([1 - s - t, s, t], axis=-1)
        return w @ ref
    return _bilinear(st) @ ref


def _face_density_check(etype, coords, rho, local_face, st0, xp, rho_t, iters=20):
    """Density at the projection point of a (possibly warped) face; ``nan`` if inversion fails."""
    face = list(fem.reference_faces(etype)[local_face])
    st = np.array(st0, dtype=float, copy=True)
    ok = np.ones(len(st), dtype=bool)
    if len(face) == 4:
        ref = fem.reference_vertices(etype)[face]
        pts = coords[:, face]
        scale = fem.element_diameter(coords)
        for _ in range(iters):
            M = _bilinear(st)
            x = np.einsum("bc,bck->bk", M, pts)
            dM = _bilinear_grad(st)
            T = np.einsum("bcj,bck->bkj", dM, pts)
            r = x - xp
            JtJ = np.einsum("bki,bkj->bij", T, T)
            det = np.linalg.det(JtJ)
            bad = ~(det > 1e-24 * scale**4)
            JtJ[bad] = np.eye(2)
            step = -np.linalg.solve(JtJ, np.einsum("bki,bk->bi", T, r)[..., None])[..., 0]
            ok &= ~bad
            st = st + step
            if np.all(np.abs(step) < 1e-13):
                break
        ok &= np.all(np.abs(step) < 1e-8, axis=1)
        ok &= np.all(np.abs(st) <= 1.0 + 1e-8, axis=1)
        xi = np.clip(st @ np.zeros((2, 3)) + _bilinear(st) @ ref, -1.0, 1.0)
    else:
        xi = _face_xi(etype, local_face, st)
    val = np.sum(fem.shape_values(etype, xi) * rho, axis=-1)
    return np.where(ok, val, np.nan)


def _face_distances(etype, coords, rho, local_face, xg, rho_t, transitional):
    """Distances from points ``xg (B, 3)`` to the face ``local_face`` of elements ``coords (B, n, 3)``."""
    nb = xg.shape[0]
    face = list(fem.reference_faces(etype)[local_face])
    pts = coords[:, face]
    if len(face) == 4:
        centre = pts.mean(axis=1)
        fan = [(pts[:, i], pts[:, (i + 1) % 4], centre, i) for i in range(4)]
    else:
        fan = [(pts[:, 0], pts[:, 1], pts[:, 2], None)]
    best = np.full(nb, np.inf)
    best_xp = np.zeros((nb, 3))
    best_st = np.zeros((nb, 2))
    for a, b, c, i in fan:
        d, xp, lam = distance_to_triangles(xg, a, b, c)
        if i is None:
            st = lam[:, 1:3]
        else:
            st = lam[:, 0:1] * _QUAD_ST[i] + lam[:, 1:2] * _QUAD_ST[(i + 1) % 4]
        better = d < best
        best = np.where(better, d, best)
        best_xp = np.where(better[:, None], xp, best_xp)
        best_st = np.where(better[:, None], st, best_st)
    if transitional:
        dens = _face_density_check(etype, coords, rho, local_face, best_st, best_xp, rho_t)
        keep = dens >= rho_t  # nan (failed inversion) compares False
        best = np.where(keep, best, np.inf)
    return best, best_xp


def distance_to_boundary_face(x_g, face, mesh: UnstructuredMesh, nodal_rho, rho_t, transitional: bool):
    """Distance to an exterior face; ``None`` if rejected by the transitional density check."""
    rho = _nodal(mesh, nodal_rho)
    e = face.element
    et = mesh.element_type(e)
    conn = mesh.element_nodes(e)
    d, xp = _face_distances(
        et,
        mesh.nodes[conn][None],
        rho[conn][None],
        face.local_face,
        np.asarray(x_g, dtype=float)[None],
        rho_t,
        transitional,
    )
    if not np.isfinite(d[0]):
        return None
    return float(d[0]), xp[0]


# ------------------------------------------------------------------ assembly


def aabb_candidates(grid: CartesianGrid, lo, hi, elements):
    """Bucket lookup: ``(element, node)`` pairs for nodes inside each element's box.

    The grid itself is the bucket structure; the nodes of a box are found
    by index arithmetic, so the cost is proportional to the box size.
    """
    ee, nn = [], []
    for e in elements:
        nodes = grid.nodes_in_box(lo[e], hi[e])
        if nodes.size:
            ee.append(np.full(nodes.size, e, dtype=np.int64))
            nn.append(nodes)
    if not ee:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(ee), np.concatenate(nn)


def _chunks(pair_e, pair_n, size=CHUNK_PAIRS):
    for s in range(0, pair_e.size, size):
        yield pair_e[s : s + size], pair_n[s : s + size]


def _default_threads(threads):
    if threads is None:
        threads = int(os.environ.get("SIMPSDF_THREADS", "1") or 1)
    return max(1, int(threads))


def _point_candidates(points, lo, hi, elements):
    ee, nn = [], []
    for e in elements:
        hit = np.flatnonzero(np.all((points >= lo[e]) & (points <= hi[e]), axis=1))
        ee.append(np.full(hit.size, e, dtype=np.int64))
        nn.append(hit)
    if not ee:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(ee), np.concatenate(nn)


def sdf_contributions(mesh, nodal_rho, rho_t, grid=None, expansion=2.0, threads=None, faces=None, points=None, h=None):
    """All distance candidates as ``(node, element, kind, distance)`` arrays.

    ``kind`` is 0 for isocontour projections, 1 for solid faces and 2 for
    accepted transitional faces. Failed projections are dropped. Instead of
    a grid, arbitrary ``points`` may be given, with boxes expanded by
    ``expansion * h``; ``node`` then indexes ``points``.
    """
    rho = _nodal(mesh, nodal_rho)
    cls, ext = classify_elements(mesh, rho, rho_t, faces)
    lo, hi = mesh.element_bounds
    if points is not None:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        pad = expansion * (mesh.shortest_edge() if h is None else h)
        point_fn = lambda ids: pts[ids]  # noqa: E731
        cand = lambda lo_, hi_, els: _point_candidates(pts, lo_, hi_, els)  # noqa: E731
    else:
        pad = expansion * grid.spacing
        point_fn = grid.points
        cand = lambda lo_, hi_, els: aabb_candidates(grid, lo_, hi_, els)  # noqa: E731
    lo, hi = lo - pad, hi + pad
    jobs = []
    for et, ids, conn in mesh.blocks():
        iso = ids[np.isin(cls[ids], (ElementClass.ISOCONTOUR, ElementClass.TRANSITIONAL_BOUNDARY))]
        pe, pn = cand(lo, hi, iso)
        for ce, cn in _chunks(pe, pn):
            jobs.append(("iso", et, ce, cn, None))
        for kind, want in ((1, ElementClass.SOLID_BOUNDARY), (2, ElementClass.TRANSITIONAL_BOUNDARY)):
            for lf in range(len(fem.reference_faces(et))):
                owners = [e for e in ids[cls[ids] == want] if any(f.local_face == lf for f in ext.get(int(e), ()))]
                pe, pn = cand(lo, hi, owners)
                for ce, cn in _chunks(pe, pn):
                    jobs.append((kind, et, ce, cn, lf))

    def run(job):
        kind, et, ce, cn, lf = job
        n_en = et.n_nodes
        conn = mesh.connectivity[:, :n_en]
        xg = point_fn(cn)
        if kind == "iso":
            uniq, inv = np.unique(ce, return_inverse=True)
            d, _, ok = distance_to_isocontour_batch(et, mesh.nodes[conn[uniq]], rho[conn[uniq]], xg, rho_t, inv)
            return cn[ok], ce[ok], np.zeros(ok.sum(), dtype=np.int8), d[ok], int((~ok).sum())
        d, _ = _face_distances(et, mesh.nodes[conn[ce]], rho[conn[ce]], lf, xg, rho_t, kind == 2)
        ok = np.isfinite(d)
        return cn[ok], ce[ok], np.full(ok.sum(), kind, dtype=np.int8), d[ok], 0

    threads = _default_threads(threads)
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    if not results:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0, dtype=np.int8), np.zeros(0), {"failed_projections": 0}
    nodes = np.concatenate([r[0] for r in results])
    elems = np.concatenate([r[1] for r in results])
    kinds = np.concatenate([r[2] for r in results])
    dists = np.concatenate([r[3] for r in results])
    info = {
        "failed_projections": int(sum(r[4] for r in results)),
        "classes": {c.name: int(np.sum(cls == c)) for c in ElementClass},
    }
    return nodes, elems, kinds, dists, info


def assign_signs(grid, mesh: UnstructuredMesh, nodal_rho, rho_t: float) -> np.ndarray:
    """``+1`` where a containing element has interpolated density ``>= rho_t``, else ``-1``.

    Steps: boxes of elements with a node at or above the threshold, node-to-box
    candidates, membership by inverse mapping, density interpolation, sign rule.
    ``grid`` may also be an array of points, in which case a flat array is
    returned.
    """
    rho = _nodal(mesh, nodal_rho)
    if isinstance(grid, CartesianGrid):
        n_pts, point_fn, shape = grid.n_nodes, grid.points, grid.shape
        cand = lambda lo_, hi_, els: aabb_candidates(grid, lo_, hi_, els)  # noqa: E731
    else:
        pts = np.atleast_2d(np.asarray(grid, dtype=float))
        n_pts, point_fn, shape = len(pts), (lambda ids: pts[ids]), (len(pts),)
        cand = lambda lo_, hi_, els: _point_candidates(pts, lo_, hi_, els)  # noqa: E731
    positive = np.zeros(n_pts, dtype=bool)
    lo, hi = mesh.element_bounds
    for et, ids, conn in mesh.blocks():
        keep = rho[conn].max(axis=1) >= rho_t
        slack = 1e-9 * (hi - lo).max(axis=1, keepdims=True)
        pe, pn = cand(lo - slack, hi + slack, ids[keep])
        full = mesh.connectivity[:, : et.n_nodes]
        for ce, cn in _chunks(pe, pn, 50000):
            xi, inside = fem.invert_mapping_batch(et, mesh.nodes[full[ce]], point_fn(cn))
            val = np.sum(fem.shape_values(et, xi) * rho[full[ce]], axis=1)
            hit = inside & (val >= rho_t)
            positive[cn[hit]] = True
    return np.where(positive, 1, -1).astype(np.int8).reshape(shape)


def signed_distance_at(mesh, nodal_rho, rho_t, points, h=None, expansion=2.0, band=None):
    """The SDF construction evaluated at arbitrary points instead of grid nodes."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    h = mesh.shortest_edge() if h is None else h
    band = expansion * h if band is None else band
    nodes, _, _, dists, _ = sdf_contributions(mesh, nodal_rho, rho_t, expansion=expansion, points=pts, h=h)
    unsigned = np.full(len(pts), np.inf)
    np.minimum.at(unsigned, nodes, dists)
    sign = assign_signs(pts, mesh, nodal_rho, rho_t)
    mag = np.minimum(unsigned, band)
    return np.where(mag == 0.0, 0.0, sign * mag)


def build_sdf(
    mesh: UnstructuredMesh,
    nodal_rho,
    rho_t: float = 0.5,
    grid: CartesianGrid | None = None,
    band: float | None = None,
    expansion: float = 2.0,
    threads: int | None = None,
) -> SdfField:
    """Signed distance field of the density isocontour.

    Nodes outside every expanded box, and any node farther than ``band``
    (default ``expansion * h``), get ``|phi| = band`` with the assigned sign.
    """
    rho = _nodal(mesh, nodal_rho)
    if grid is None:
        grid = build_grid(mesh)
    if band is None:
        band = expansion * grid.spacing
    nodes, _, kinds, dists, info = sdf_contributions(mesh, rho, rho_t, grid, expansion, threads)
    unsigned = np.full(grid.n_nodes, np.inf)
    np.minimum.at(unsigned, nodes, dists)
    sign = assign_signs(grid, mesh, rho, rho_t).ravel()
    reached = np.isfinite(unsigned)
    mag = np.minimum(unsigned, band)
    phi = np.where(mag == 0.0, 0.0, sign * mag)
    info.update(
        {
            "reached_nodes": int(reached.sum()),
            "positive_nodes": int((sign > 0).sum()),
            "contributions": {k: int(np.sum(kinds == i)) for i, k in enumerate(("isocontour", "solid_face", "transitional_face"))},
        }
    )
    return SdfField(grid, phi.reshape(grid.shape), band=band, info=info)
