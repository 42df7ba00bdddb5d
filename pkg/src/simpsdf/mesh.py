"""Linear finite-element meshes and isoparametric machinery.

Reference elements
------------------
HEX8
    Trilinear brick on ``[-1, 1]^3``. Local node ``a`` sits at the corner
    ``HEX8_VERTICES[a]`` (bottom face counter-clockwise, then top face),
    which is also the VTK ordering.
TET4
    Linear tetrahedron with vertices ``(0,0,0), (1,0,0), (0,1,0), (0,0,1)``.
    A local point is inside when ``xi_i >= 0`` and ``xi_1 + xi_2 + xi_3 <= 1``;
    the enclosing box is ``[0, 1]^3``.

All shape-function routines broadcast over leading axes of ``xi``.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np


class ElementType(str, enum.Enum):
    HEX8 = "HEX8"
    TET4 = "TET4"

    @property
    def n_nodes(self) -> int:
        return 8 if self is ElementType.HEX8 else 4

    @property
    def code(self) -> int:
        return 0 if self is ElementType.HEX8 else 1


ELEMENT_TYPES = (ElementType.HEX8, ElementType.TET4)

HEX8_VERTICES = np.array(
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
    dtype=float,
)
TET4_VERTICES = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)

# Local faces ordered so the right-hand normal points out of the element.
HEX8_FACES = ((0, 4, 7, 3), (1, 2, 6, 5), (0, 1, 5, 4), (2, 3, 7, 6), (0, 3, 2, 1), (4, 5, 6, 7))
TET4_FACES = ((0, 2, 1), (0, 1, 3), (0, 3, 2), (1, 2, 3))

# Kuhn split of the cube along the 0-6 diagonal; neighbouring cells of a
# regular lattice triangulate their shared faces identically.
HEX8_TETS = ((0, 1, 2, 6), (0, 1, 5, 6), (0, 3, 2, 6), (0, 3, 7, 6), (0, 4, 5, 6), (0, 4, 7, 6))


def element_type(value) -> ElementType:
    if isinstance(value, ElementType):
        return value
    try:
        return ElementType(str(value).upper())
    except ValueError:
        raise ValueError(f"unknown element type {value!r}") from None


def reference_vertices(etype) -> np.ndarray:
    etype = element_type(etype)
    return HEX8_VERTICES if etype is ElementType.HEX8 else TET4_VERTICES


def reference_faces(etype) -> tuple[tuple[int, ...], ...]:
    etype = element_type(etype)
    return HEX8_FACES if etype is ElementType.HEX8 else TET4_FACES


def reference_bounds(etype) -> tuple[np.ndarray, np.ndarray]:
    """Box bounds of the reference element (the tet's box is its bounding box)."""
    etype = element_type(etype)
    if etype is ElementType.HEX8:
        return -np.ones(3), np.ones(3)
    return np.zeros(3), np.ones(3)


def reference_centroid(etype) -> np.ndarray:
    return reference_vertices(etype).mean(axis=0)


def in_reference(etype, xi, slack: float = 1e-8) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    etype = element_type(etype)
    if etype is ElementType.HEX8:
        return np.all(np.abs(xi) <= 1.0 + slack, axis=-1)
    return np.all(xi >= -slack, axis=-1) & (xi.sum(axis=-1) <= 1.0 + slack)


def shape_values(etype, xi) -> np.ndarray:
    """Shape functions ``N_a(xi)``; returns shape ``xi.shape[:-1] + (n_en,)``."""
    etype = element_type(etype)
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != 3:
        raise ValueError("local coordinates must have 3 components")
    if etype is ElementType.HEX8:
        f = 1.0 + xi[..., None, :] * HEX8_VERTICES
        return 0.125 * f[..., 0] * f[..., 1] * f[..., 2]
    return np.stack([1.0 - xi.sum(axis=-1), xi[..., 0], xi[..., 1], xi[..., 2]], axis=-1)


def shape_gradients(etype, xi) -> np.ndarray:
    """``dN_a/dxi_i``; returns shape ``xi.shape[:-1] + (n_en, 3)``."""
    etype = element_type(etype)
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != 3:
        raise ValueError("local coordinates must have 3 components")
    if etype is ElementType.HEX8:
        s = HEX8_VERTICES
        f = 1.0 + xi[..., None, :] * s
        g = np.empty(xi.shape[:-1] + (8, 3))
        g[..., 0] = 0.125 * s[:, 0] * f[..., 1] * f[..., 2]
        g[..., 1] = 0.125 * s[:, 1] * f[..., 0] * f[..., 2]
        g[..., 2] = 0.125 * s[:, 2] * f[..., 0] * f[..., 1]
        return g
    g = np.array([[-1.0, -1.0, -1.0], [1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    return np.broadcast_to(g, xi.shape[:-1] + (4, 3)).copy()


def shape_hessians(etype, xi) -> np.ndarray:
    """Second derivatives ``d2N_a/dxi_i dxi_j``; shape ``(..., n_en, 3, 3)``."""
    etype = element_type(etype)
    xi = np.asarray(xi, dtype=float)
    if etype is ElementType.TET4:
        return np.zeros(xi.shape[:-1] + (4, 3, 3))
    s = HEX8_VERTICES
    f = 1.0 + xi[..., None, :] * s
    hs = np.zeros(xi.shape[:-1] + (8, 3, 3))
    for i, j in ((0, 1), (0, 2), (1, 2)):
        k = 3 - i - j
        v = 0.125 * s[:, i] * s[:, j] * f[..., k]
        hs[..., i, j] = v
        hs[..., j, i] = v
    return hs


def interpolate_scalar(etype, nodal_values, xi) -> np.ndarray | float:
    """Field value ``sum_a N_a(xi) v_a``; ``nodal_values`` may carry a batch axis."""
    etype = element_type(etype)
    v = np.asarray(nodal_values, dtype=float)
    if v.shape[-1] != etype.n_nodes:
        raise ValueError(f"{etype.value} needs {etype.n_nodes} nodal values, got {v.shape[-1]}")
    out = np.sum(shape_values(etype, xi) * v, axis=-1)
    return float(out) if out.ndim == 0 else out


def interpolate_position(etype, coords, xi) -> np.ndarray:
    """Physical point ``x(xi) = sum_a N_a(xi) x_a``; ``coords`` is ``(..., n_en, 3)``."""
    etype = element_type(etype)
    coords = np.asarray(coords, dtype=float)
    return np.einsum("...a,...ak->...k", shape_values(etype, xi), coords)


def jacobian(etype, coords, xi) -> np.ndarray:
    """``J[k, i] = dx_k / dxi_i``."""
    return np.einsum("...ai,...ak->...ki", shape_gradients(etype, xi), np.asarray(coords, dtype=float))


def element_diameter(coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=float)
    return np.linalg.norm(coords.max(axis=-2) - coords.min(axis=-2), axis=-1)


def invert_mapping_batch(
    etype,
    coords,
    x,
    tol: float = 1e-9,
    max_iter: int = 30,
    slack: float = 1e-8,
    xi0=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``x(xi) = x_g`` for many (element, point) pairs at once.

    ``coords`` is ``(B, n_en, 3)`` and ``x`` is ``(B, 3)``. Returns the local
    coordinates and a mask that is True where Newton converged to within
    ``tol * diameter`` and the point lies inside the reference element (with
    ``slack``). Non-convergence is reported as "not inside" rather than raised.
    """
    etype = element_type(etype)
    coords = np.asarray(coords, dtype=float)
    x = np.asarray(x, dtype=float)
    nb = x.shape[0]
    diam = element_diameter(coords)
    gtol = tol * diam
    if etype is ElementType.TET4:
        # affine map: one linear solve
        J = coords[:, 1:, :] - coords[:, :1, :]
        xi = np.linalg.solve(np.swapaxes(J, 1, 2), (x - coords[:, 0, :])[..., None])[..., 0]
        res = np.linalg.norm(interpolate_position(etype, coords, xi) - x, axis=-1)
        ok = (res < np.maximum(gtol, 1e-300)) & in_reference(etype, xi, slack)
        return xi, ok

    xi = np.zeros((nb, 3)) if xi0 is None else np.array(xi0, dtype=float, copy=True)
    r = interpolate_position(etype, coords, xi) - x
    rn = np.linalg.norm(r, axis=-1)
    conv = rn < gtol
    failed = np.zeros(nb, dtype=bool)
    for _ in range(max_iter):
        act = np.flatnonzero(~conv & ~failed)
        if act.size == 0:
            break
        J = jacobian(etype, coords[act], xi[act])
        det = np.linalg.det(J)
        bad = ~(np.abs(det) > 1e-14 * diam[act] ** 3)
        J[bad] = np.eye(3)
        dxi = -np.linalg.solve(J, r[act][..., None])[..., 0]
        failed[act[bad]] = True
        alpha = np.ones(act.size)
        xa = xi[act]
        rn_a = rn[act]
        accepted = np.zeros(act.size, dtype=bool)
        for _ls in range(12):
            trial = xa + alpha[:, None] * dxi
            rt = interpolate_position(etype, coords[act], trial) - x[act]
            rtn = np.linalg.norm(rt, axis=-1)
            good = ~accepted & (rtn < rn_a)
            xi[act[good]] = trial[good]
            r[act[good]] = rt[good]
            rn[act[good]] = rtn[good]
            accepted |= good
            if accepted.all():
                break
            alpha = np.where(accepted, alpha, 0.5 * alpha)
        failed[act[~accepted]] = True
        conv = rn < gtol
        # iterates running away from the element will not come back inside
        failed |= np.abs(xi).max(axis=-1) > 1e3
    ok = conv & in_reference(etype, xi, slack)
    return xi, ok


def invert_mapping(etype, coords, x, tol: float = 1e-9, max_iter: int = 30, slack: float = 1e-8):
    """Local coordinates of ``x`` in one element, or ``None`` when not inside."""
    xi, ok = invert_mapping_batch(
        etype, np.asarray(coords, dtype=float)[None], np.asarray(x, dtype=float)[None], tol, max_iter, slack
    )
    return xi[0] if ok[0] else None


@dataclass(frozen=True)
class BoundaryFace:
    element: int
    local_face: int
    nodes: tuple[int, ...]
    outward: bool = True


class UnstructuredMesh:
    """Immutable mixed HEX8/TET4 mesh.

    Connectivity is stored as an ``(E, 8)`` integer array padded with ``-1``
    for tetrahedra, together with a per-element type code.
    """

    def __init__(self, nodes, elements=None, *, types=None, connectivity=None, validate: bool = True):
        self.nodes = np.ascontiguousarray(nodes, dtype=float)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 3:
            raise ValueError("nodes must be an (N, 3) array")
        if elements is not None:
            elements = list(elements)
            codes = np.empty(len(elements), dtype=np.int8)
            conn = -np.ones((len(elements), 8), dtype=np.int64)
            for e, (et, ids) in enumerate(elements):
                et = element_type(et)
                ids = tuple(int(i) for i in ids)
                if len(ids) != et.n_nodes:
                    raise ValueError(f"element {e}: {et.value} needs {et.n_nodes} nodes, got {len(ids)}")
                codes[e] = et.code
                conn[e, : len(ids)] = ids
        else:
            codes = np.asarray(types, dtype=np.int8)
            conn = np.asarray(connectivity, dtype=np.int64)
            if conn.shape[1] == 4:
                conn = np.hstack([conn, -np.ones((conn.shape[0], 4), dtype=np.int64)])
        self.type_codes = codes
        self.connectivity = conn
        self.nodes.setflags(write=False)
        self.type_codes.setflags(write=False)
        self.connectivity.setflags(write=False)
        if validate:
            self._validate()

    def _validate(self) -> None:
        if self.n_elements == 0:
            return
        for et, ids, conn in self.blocks():
            if conn.min() < 0 or conn.max() >= self.n_nodes:
                raise ValueError(f"{et.value} connectivity references a node outside 0..{self.n_nodes - 1}")
            srt = np.sort(conn, axis=1)
            if np.any(srt[:, 1:] == srt[:, :-1]):
                bad = ids[np.any(srt[:, 1:] == srt[:, :-1], axis=1)][0]
                raise ValueError(f"element {bad} has repeated node indices")
            det = np.linalg.det(jacobian(et, self.nodes[conn], reference_centroid(et)))
            if np.any(det <= 0):
                raise ValueError(f"element {ids[det <= 0][0]} has non-positive Jacobian at its centroid")

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.connectivity.shape[0]

    def element_type(self, e: int) -> ElementType:
        return ELEMENT_TYPES[self.type_codes[e]]

    def element_nodes(self, e: int) -> np.ndarray:
        conn = self.connectivity[e]
        return conn[: self.element_type(e).n_nodes]

    def element_coords(self, e: int) -> np.ndarray:
        return self.nodes[self.element_nodes(e)]

    def elements(self):
        """Yield ``(ElementType, node tuple)`` per element."""
        for e in range(self.n_elements):
            yield self.element_type(e), tuple(int(i) for i in self.element_nodes(e))

    def blocks(self):
        """Yield ``(etype, element_ids, connectivity)`` for each element type present."""
        for et in ELEMENT_TYPES:
            ids = np.flatnonzero(self.type_codes == et.code)
            if ids.size:
                yield et, ids, self.connectivity[ids, : et.n_nodes]

    @cached_property
    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        if self.n_nodes == 0:
            raise ValueError("empty mesh")
        return self.nodes.min(axis=0), self.nodes.max(axis=0)

    @cached_property
    def centroids(self) -> np.ndarray:
        c = np.empty((self.n_elements, 3))
        for et, ids, conn in self.blocks():
            c[ids] = self.nodes[conn].mean(axis=1)
        return c

    @cached_property
    def element_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.empty((self.n_elements, 3))
        hi = np.empty((self.n_elements, 3))
        for et, ids, conn in self.blocks():
            xyz = self.nodes[conn]
            lo[ids] = xyz.min(axis=1)
            hi[ids] = xyz.max(axis=1)
        return lo, hi

    @cached_property
    def volumes(self) -> np.ndarray:
        """Element volumes (2x2x2 Gauss for HEX8, exact for TET4)."""
        v = np.empty(self.n_elements)
        for et, ids, conn in self.blocks():
            xyz = self.nodes[conn]
            if et is ElementType.TET4:
                v[ids] = np.abs(np.linalg.det(xyz[:, 1:] - xyz[:, :1])) / 6.0
            else:
                g = 1.0 / np.sqrt(3.0)
                acc = np.zeros(ids.size)
                for p in itertools.product((-g, g), repeat=3):
                    acc += np.linalg.det(jacobian(et, xyz, np.array(p)))
                v[ids] = acc
        return v

    def shortest_edge(self) -> float:
        best = np.inf
        for et, ids, conn in self.blocks():
            xyz = self.nodes[conn]
            if et is ElementType.HEX8:
                pairs = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)]
            else:
                pairs = list(itertools.combinations(range(4), 2))
            for a, b in pairs:
                best = min(best, float(np.linalg.norm(xyz[:, a] - xyz[:, b], axis=1).min()))
        if not np.isfinite(best):
            raise ValueError("empty mesh")
        return best

    @cached_property
    def node_elements(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR ``(offsets, element_ids)`` of the elements incident to each node."""
        rows, cols = [], []
        for et, ids, conn in self.blocks():
            rows.append(conn.ravel())
            cols.append(np.repeat(ids, et.n_nodes))
        if not rows:
            return np.zeros(self.n_nodes + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        order = np.lexsort((c, r))
        r, c = r[order], c[order]
        offsets = np.zeros(self.n_nodes + 1, dtype=np.int64)
        np.add.at(offsets, r + 1, 1)
        return np.cumsum(offsets), c

    @cached_property
    def _boundary_faces(self) -> list[BoundaryFace]:
        return _find_boundary_faces(self)

    def boundary_faces(self) -> list[BoundaryFace]:
        return list(self._boundary_faces)


class NonManifoldMeshError(ValueError):
    pass


def _find_boundary_faces(mesh: UnstructuredMesh) -> list[BoundaryFace]:
    keys, owners, locals_, nodes = [], [], [], []
    for et, ids, conn in mesh.blocks():
        for lf, face in enumerate(reference_faces(et)):
            fn = conn[:, face]
            k = np.sort(fn, axis=1)
            if k.shape[1] == 3:
                k = np.hstack([k, -np.ones((k.shape[0], 1), dtype=np.int64)])
            keys.append(k)
            owners.append(ids)
            locals_.append(np.full(ids.size, lf))
            nodes.append(fn if fn.shape[1] == 4 else np.hstack([fn, -np.ones((fn.shape[0], 1), dtype=np.int64)]))
    if not keys:
        return []
    keys = np.vstack(keys)
    owners = np.concatenate(owners)
    locals_ = np.concatenate(locals_)
    nodes = np.vstack(nodes)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if counts.max() > 2:
        raise NonManifoldMeshError(f"a face is shared by {counts.max()} elements")
    single = counts[inverse] == 1
    faces = [
        BoundaryFace(int(owners[i]), int(locals_[i]), tuple(int(n) for n in nodes[i] if n >= 0))
        for i in np.flatnonzero(single)
    ]
    faces.sort(key=lambda f: (f.element, f.local_face))
    return faces


def boundary_faces(mesh: UnstructuredMesh) -> list[BoundaryFace]:
    """Exterior faces: those referenced by exactly one element, outward-ordered."""
    return mesh.boundary_faces()


def structured_hex_mesh(shape, size, origin=(0.0, 0.0, 0.0), nodes=None) -> UnstructuredMesh:
    """Regular ``nx x ny x nz`` brick mesh of the box ``origin + [0, size]``.

    Node ``(i, j, k)`` has index ``(i * (ny + 1) + j) * (nz + 1) + k``;
    element ``(i, j, k)`` has index ``(i * ny + j) * nz + k``. ``nodes`` may
    override the generated coordinates (same ordering) to build distorted meshes.
    """
    nx, ny, nz = (int(n) for n in shape)
    lx, ly, lz = (float(s) for s in size)
    if nodes is None:
        axes = [np.linspace(o, o + l, n + 1) for o, l, n in zip(origin, (lx, ly, lz), (nx, ny, nz))]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    nid = np.arange((nx + 1) * (ny + 1) * (nz + 1)).reshape(nx + 1, ny + 1, nz + 1)
    corner = lambda di, dj, dk: nid[di : di + nx, dj : dj + ny, dk : dk + nz].ravel()
    conn = np.column_stack(
        [
            corner(0, 0, 0),
            corner(1, 0, 0),
            corner(1, 1, 0),
            corner(0, 1, 0),
            corner(0, 0, 1),
            corner(1, 0, 1),
            corner(1, 1, 1),
            corner(0, 1, 1),
        ]
    )
    return UnstructuredMesh(nodes, types=np.zeros(conn.shape[0], dtype=np.int8), connectivity=conn)


def hex_to_tet_mesh(mesh: UnstructuredMesh) -> UnstructuredMesh:
    """Split every HEX8 into six positively oriented TET4 (Kuhn pattern)."""
    conns = []
    for et, ids, conn in mesh.blocks():
        if et is ElementType.TET4:
            conns.append(conn)
            continue
        for t in HEX8_TETS:
            c = conn[:, list(t)]
            xyz = mesh.nodes[c]
            det = np.linalg.det(xyz[:, 1:] - xyz[:, :1])
            c[det < 0] = c[det < 0][:, [0, 2, 1, 3]]
            conns.append(c)
    conn = np.vstack(conns)
    return UnstructuredMesh(mesh.nodes, types=np.ones(conn.shape[0], dtype=np.int8), connectivity=conn)
