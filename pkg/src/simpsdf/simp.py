"""Minimal 3D SIMP compliance minimisation on structured HEX8 meshes.

Stiffness interpolation ``E(rho) = Emin + rho^p (E0 - Emin)``, linear density
filter with cone weights ``max(0, rmin - dist)``, and the optimality-criteria
update with move limit and damping. The design variables are filtered
before they enter the stiffness, so sensitivities are chained through the
filter.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from . import mesh as fem
from .mesh import ElementType, UnstructuredMesh, structured_hex_mesh


@dataclass(frozen=True)
class Material:
    E0: float = 1.0
    Emin: float = 1e-9
    nu: float = 0.3

    def __post_init__(self):
        if not 0 < self.Emin < self.E0:
            raise ValueError("need 0 < Emin < E0")
        if not -1.0 < self.nu < 0.5:
            raise ValueError("Poisson ratio must lie in (-1, 0.5)")

    def young(self, rho, p):
        return self.Emin + np.asarray(rho, dtype=float) ** p * (self.E0 - self.Emin)


@dataclass
class SimpProblem:
    mesh: UnstructuredMesh
    fixed_dofs: np.ndarray
    force: np.ndarray
    volfrac: float = 0.4
    material: Material = field(default_factory=Material)
    penal: float = 3.0
    rmin: float = 1.5
    move: float = 0.2
    eta: float = 0.5
    max_iter: int = 200
    tol: float = 0.01

    def __post_init__(self):
        self.fixed_dofs = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        self.force = np.asarray(self.force, dtype=float)
        if self.force.shape != (3 * self.mesh.n_nodes,):
            raise ValueError("force vector must have 3 entries per node")
        if not 0 < self.volfrac <= 1:
            raise ValueError("volume fraction must lie in (0, 1]")
        if self.penal < 1 or self.rmin <= 0 or self.move <= 0:
            raise ValueError("need penal >= 1, rmin > 0 and move > 0")


@dataclass
class SimpResult:
    """``compliance[k]`` is evaluated at the start of iteration ``k + 1``; the last entry is the returned field."""

    densities: np.ndarray
    design: np.ndarray
    compliance: list
    volume_fraction: float
    iterations: int
    converged: bool
    change: list = field(default_factory=list)


def _elasticity(nu):
    lam = nu / ((1 + nu) * (1 - 2 * nu))
    mu = 1.0 / (2 * (1 + nu))
    D = np.zeros((6, 6))
    D[:3, :3] = lam
    D[np.arange(3), np.arange(3)] += 2 * mu
    D[np.arange(3, 6), np.arange(3, 6)] = mu
    return D


def element_stiffness(coords, nu: float = 0.3, E: float = 1.0) -> np.ndarray:
    """24x24 HEX8 stiffness by 2x2x2 Gauss quadrature, DOF order ``3 a + d``."""
    g = 1.0 / np.sqrt(3.0)
    pts = np.array([[i, j, k] for i in (-g, g) for j in (-g, g) for k in (-g, g)])
    D = E * _elasticity(nu)
    K = np.zeros((24, 24))
    for xi in pts:
        dN = fem.shape_gradients(ElementType.HEX8, xi)
        J = coords.T @ dN
        detJ = np.linalg.det(J)
        dNdx = dN @ np.linalg.inv(J)
        B = np.zeros((6, 24))
        for a in range(8):
            bx, by, bz = dNdx[a]
            c = 3 * a
            B[0, c], B[1, c + 1], B[2, c + 2] = bx, by, bz
            B[3, c + 1], B[3, c + 2] = bz, by
            B[4, c], B[4, c + 2] = bz, bx
            B[5, c], B[5, c + 1] = by, bx
        K += B.T @ D @ B * detJ
    return 0.5 * (K + K.T)


def _edofs(mesh):
    conn = mesh.connectivity[:, :8]
    return (3 * conn[:, :, None] + np.arange(3)).reshape(len(conn), 24)


def _reference_stiffness(mesh, nu):
    if any(et is not ElementType.HEX8 for et, _, _ in mesh.blocks()):
        raise ValueError("the SIMP solver supports HEX8 meshes only")
    k0 = element_stiffness(mesh.element_coords(0), nu)
    vol = mesh.volumes
    if np.ptp(vol) > 1e-9 * vol.max():
        raise ValueError("the SIMP solver expects a structured mesh with identical elements")
    return k0


def assemble_stiffness(mesh, rho, material: Material, penal: float, k0=None):
    if k0 is None:
        k0 = _reference_stiffness(mesh, material.nu)
    ed = _edofs(mesh)
    E = material.young(rho, penal)
    rows = np.repeat(ed, 24, axis=1).ravel()
    cols = np.tile(ed, (1, 24)).ravel()
    vals = (E[:, None, None] * k0[None]).ravel()
    n = 3 * mesh.n_nodes
    K = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    return 0.5 * (K + K.T)


def _check_constraints(mesh, fixed):
    """Fixed DOFs must suppress the six rigid-body modes."""
    x = mesh.nodes - mesh.nodes.mean(axis=0)
    R = np.zeros((mesh.n_nodes, 3, 6))
    for d in range(3):
        R[:, d, d] = 1.0
    # rotations about x, y, z
    R[:, 1, 3], R[:, 2, 3] = -x[:, 2], x[:, 1]
    R[:, 0, 4], R[:, 2, 4] = x[:, 2], -x[:, 0]
    R[:, 0, 5], R[:, 1, 5] = -x[:, 1], x[:, 0]
    R = R.reshape(-1, 6)[fixed]
    if R.shape[0] < 6 or np.linalg.matrix_rank(R, tol=1e-9 * max(1.0, np.abs(R).max())) < 6:
        raise np.linalg.LinAlgError("singular system: fixed DOFs do not remove all rigid-body modes")


def solve_equilibrium(mesh, rho, material: Material, fixed_dofs, force, penal: float = 3.0, k0=None, rtol: float = 1e-8):
    """Displacements ``U`` with ``K U = F`` on the free DOFs (Jacobi-PCG, direct fallback)."""
    fixed = np.unique(np.asarray(fixed_dofs, dtype=np.int64))
    F = np.asarray(force, dtype=float)
    if not np.all(np.isfinite(F)):
        raise ValueError("force vector must be finite")
    _check_constraints(mesh, fixed)
    n = 3 * mesh.n_nodes
    U = np.zeros(n)
    free = np.setdiff1d(np.arange(n), fixed)
    nF = np.linalg.norm(F[free])
    if nF == 0.0:
        return U
    K = assemble_stiffness(mesh, rho, material, penal, k0)
    Kff = K[free][:, free].tocsr()
    Ff = F[free]
    dinv = 1.0 / Kff.diagonal()
    M = spla.LinearOperator(Kff.shape, matvec=lambda v: dinv * v)
    u, info = spla.cg(Kff, Ff, rtol=0.1 * rtol, atol=0.0, M=M, maxiter=20 * len(free))
    if info != 0 or np.linalg.norm(Kff @ u - Ff) > rtol * nF:
        u = spla.spsolve(Kff.tocsc(), Ff)
    res = np.linalg.norm(Kff @ u - Ff) / nF
    if not np.all(np.isfinite(u)) or res > rtol:
        raise np.linalg.LinAlgError(f"equilibrium solve failed (relative residual {res:.3g})")
    U[free] = u
    return U


def compliance_and_sensitivity(mesh, rho, U, material: Material, penal: float = 3.0, k0=None):
    """Compliance ``F.U`` and ``dC/drho_e = -p rho^(p-1) (E0 - Emin) u_e^T k0 u_e``."""
    if k0 is None:
        k0 = _reference_stiffness(mesh, material.nu)
    ue = np.asarray(U, dtype=float)[_edofs(mesh)]
    ce = np.einsum("ei,ij,ej->e", ue, k0, ue)
    rho = np.asarray(rho, dtype=float)
    C = float(np.sum(material.young(rho, penal) * ce))
    dc = -penal * rho ** (penal - 1) * (material.E0 - material.Emin) * ce
    return C, dc


def filter_matrix(centroids, rmin: float):
    """Sparse cone-weight matrix ``H_ei = max(0, rmin - |c_e - c_i|)`` and its row sums."""
    c = np.asarray(centroids, dtype=float)
    if not rmin > 0:
        raise ValueError("rmin must be positive")
    pairs = cKDTree(c).query_pairs(rmin, output_type="ndarray")
    w = rmin - np.linalg.norm(c[pairs[:, 0]] - c[pairs[:, 1]], axis=1)
    keep = w > 0
    i, j, w = pairs[keep, 0], pairs[keep, 1], w[keep]
    n = len(c)
    diag = np.arange(n)
    H = sp.coo_matrix(
        (np.concatenate([w, w, np.full(n, rmin)]), (np.concatenate([i, j, diag]), np.concatenate([j, i, diag]))),
        shape=(n, n),
    ).tocsr()
    return H, np.asarray(H.sum(axis=1)).ravel()


def density_filter(mesh_or_centroids, rho, rmin: float):
    cent = mesh_or_centroids.centroids if hasattr(mesh_or_centroids, "centroids") else mesh_or_centroids
    H, Hs = filter_matrix(cent, rmin)
    return (H @ np.asarray(rho, dtype=float)) / Hs


def oc_update(rho, dc, volumes, volfrac, move=0.2, eta=0.5, dv=None, volume_map=None, tol: float = 1e-6):
    """Optimality-criteria step with bisection on the volume multiplier.

    ``volume_map`` converts candidate design variables into the densities whose
    volume is constrained (the density filter in :func:`run_simp`).
    """
    rho = np.asarray(rho, dtype=float)
    V = np.asarray(volumes, dtype=float)
    if dv is None:
        dv = V
    if volume_map is None:
        volume_map = lambda x: x  # noqa: E731
    B0 = np.maximum(-np.asarray(dc, dtype=float), 0.0) / np.asarray(dv, dtype=float)
    lo_b = np.maximum(0.0, rho - move)
    hi_b = np.minimum(1.0, rho + move)
    target = volfrac * V.sum()

    def step(lam):
        return np.clip(rho * (B0 / lam) ** eta, lo_b, hi_b)

    def volume(x):
        return float(V @ volume_map(x))

    l1, l2 = 1e-40, 1e40
    v_max, v_min = volume(step(l1)), volume(step(l2))
    if v_max < target * (1 - tol) or v_min > target * (1 + tol):
        raise RuntimeError(f"OC bracket failure: target {target:.6g} outside [{v_min:.6g}, {v_max:.6g}]")
    for _ in range(400):
        lm = np.sqrt(l1 * l2)
        x = step(lm)
        vm = volume(x)
        if abs(vm - target) <= tol * target:
            return x
        if vm > target:
            l1 = lm
        else:
            l2 = lm
        if l2 / l1 - 1.0 < 1e-15:
            break
    # the volume may jump across the target when many elements hit a bound
    # at once; accept the closer side only if it is within tolerance
    for lam in (l1, l2):
        x = step(lam)
        if abs(volume(x) - target) <= tol * target:
            return x
    raise RuntimeError("OC bisection did not reach the volume tolerance")


def run_simp(problem: SimpProblem, callback=None) -> SimpResult:
    """Iterate OC updates until the design change drops below ``tol``."""
    P = problem
    mesh = P.mesh
    k0 = _reference_stiffness(mesh, P.material.nu)
    H, Hs = filter_matrix(mesh.centroids, P.rmin)
    V = mesh.volumes
    x = np.full(mesh.n_elements, P.volfrac)
    # a convex average, clipped only against rounding overshoot
    phys = lambda z: np.clip((H @ z) / Hs, 0.0, 1.0)  # noqa: E731
    rho = phys(x)
    history, changes = [], []
    converged = False
    it = 0
    for it in range(1, P.max_iter + 1):
        U = solve_equilibrium(mesh, rho, P.material, P.fixed_dofs, P.force, P.penal, k0)
        C, dc = compliance_and_sensitivity(mesh, rho, U, P.material, P.penal, k0)
        history.append(C)
        dc_x = H.T @ (dc / Hs)
        dv_x = H.T @ (V / Hs)
        x_new = oc_update(x, dc_x, V, P.volfrac, P.move, P.eta, dv=dv_x, volume_map=phys)
        change = float(np.abs(x_new - x).max())
        changes.append(change)
        x = x_new
        rho = phys(x)
        if callback is not None:
            callback(it, C, rho)
        if change < P.tol:
            converged = True
            break
    # compliance of the returned field
    U = solve_equilibrium(mesh, rho, P.material, P.fixed_dofs, P.force, P.penal, k0)
    C, _ = compliance_and_sensitivity(mesh, rho, U, P.material, P.penal, k0)
    history.append(C)
    vf = float(V @ rho / V.sum())
    return SimpResult(rho, x, history, vf, it, converged, changes)


def cantilever_problem(
    nelx: int = 20,
    nely: int = 4,
    nelz: int = 10,
    size: float = 1.0,
    load: float = 1.0,
    volfrac: float = 0.4,
    **kwargs,
) -> SimpProblem:
    """Cantilever clamped at ``x = 0`` with a downward line load on the free bottom edge.

    ``y`` is the thickness direction. The load is spread over the edge nodes
    at ``x = L, z = 0`` with tributary weights.
    """
    mesh = structured_hex_mesh((nelx, nely, nelz), (nelx * size, nely * size, nelz * size))
    x = mesh.nodes
    L = nelx * size
    tol = 1e-9 * size
    clamp = np.flatnonzero(np.abs(x[:, 0]) < tol)
    fixed = (3 * clamp[:, None] + np.arange(3)).ravel()
    edge = np.flatnonzero((np.abs(x[:, 0] - L) < tol) & (np.abs(x[:, 2]) < tol))
    edge = edge[np.argsort(x[edge, 1])]
    w = np.ones(len(edge))
    if len(edge) > 1:
        w[[0, -1]] = 0.5
    F = np.zeros(3 * mesh.n_nodes)
    F[3 * edge + 2] = -load * w / w.sum()
    kwargs.setdefault("rmin", 1.5 * size)
    return SimpProblem(mesh, fixed, F, volfrac=volfrac, **kwargs)
