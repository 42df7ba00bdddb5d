"""Validation studies: sphere volume convergence and the two-element roof."""
from __future__ import annotations

import time

import numpy as np

from . import cases, geometry, sdf

SPHERE_LEVELS = (4, 8, 16, 32, 64, 128)
ORDER_RANGE = (1.80, 2.05)


def convergence_order(h, err) -> float:
    """Least-squares slope of ``log err`` against ``log h``."""
    return float(np.polyfit(np.log(np.asarray(h, dtype=float)), np.log(np.asarray(err, dtype=float)), 1)[0])


def sphere_convergence(levels=SPHERE_LEVELS, r: float = cases.SPHERE_RADIUS) -> dict:
    """Relative volume error of the FE isocontour of the exact sphere SDF per level."""
    exact = cases.sphere_volume(r)
    vols, errs, times = [], [], []
    for n in levels:
        t0 = time.perf_counter()
        mesh, phi = cases.sphere_mesh(int(n), r)
        # the nodal values are a signed distance; level 0 is the sphere
        v = geometry.fe_isocontour_volume(mesh, phi, 0.0)
        vols.append(v)
        errs.append(abs(v - exact) / exact)
        times.append(time.perf_counter() - t0)
    h = [2.0 / n for n in levels]
    p = convergence_order(h, errs)
    return {
        "levels": list(levels),
        "h": h,
        "volumes": vols,
        "relative_errors": errs,
        "order": p,
        "passed": ORDER_RANGE[0] <= p <= ORDER_RANGE[1],
        "seconds": times,
    }


def roof_density_at(points) -> np.ndarray:
    """Nodal density of :func:`cases.roof_case` evaluated in closed form.

    Returns ``nan`` outside the mesh. Used as an independent classifier: it
    does not go through the inverse isoparametric mapping.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    x, z = p[:, 0], p[:, 2]
    inside = np.all((p >= -1e-12) & (p <= np.array([2.0, 1.0, 1.0]) + 1e-12), axis=1)
    # top value rises linearly from 0 at the gables to 0.5 on the shared face
    top = 0.5 * (1.0 - np.abs(np.clip(x, 0, 2) - 1.0))
    zz = np.clip(z, 0, 1)
    rho = (1.0 - zz) * 1.0 + zz * top
    return np.where(inside, rho, np.nan)


def roof_validation(h: float = cases.ROOF_H, rho_t: float = 0.5, eps: float = 1e-6) -> dict:
    mesh, rho = cases.roof_case()
    grid = sdf.build_grid(mesh, h)
    field = sdf.build_sdf(mesh, rho, rho_t, grid)
    pts = grid.points()
    ref = roof_density_at(pts)
    expected = np.where(np.nan_to_num(ref, nan=-1.0) >= rho_t, 1, -1)
    got = np.where(field.values.ravel() >= 0, 1, -1)
    # nodes exactly on the contour carry phi = 0 and count as positive
    sign_mismatch = int(np.sum(expected != got))

    nodes, elems, kinds, dists, _ = sdf.sdf_contributions(mesh, rho, rho_t, grid)
    on_plane = np.isclose(pts[nodes, 0], 1.0, atol=1e-12)
    best = {}
    for e in (0, 1):
        sel = on_plane & (elems == e)
        d = np.full(grid.n_nodes, np.inf)
        np.minimum.at(d, nodes[sel], dists[sel])
        best[e] = d
    both = np.isfinite(best[0]) & np.isfinite(best[1])
    equi = float(np.abs(best[0][both] - best[1][both]).max()) if both.any() else 0.0

    phi = field.values
    symmetry = float(np.abs(phi - phi[::-1, :, :]).max())

    ys = grid.axis(1)
    zs = grid.axis(2)
    Y, Z = np.meshgrid(ys, zs, indexing="ij")
    # the distance field is 1-Lipschitz, so a continuous field moves by at
    # most eps between the shared face and a point eps away on either side
    mid = np.column_stack([np.full(Y.size, 1.0), Y.ravel(), Z.ravel()])
    probes = np.vstack([mid - [eps, 0, 0], mid, mid + [eps, 0, 0]])
    val = sdf.signed_distance_at(mesh, rho, rho_t, probes, h=h).reshape(3, -1)
    jump = float(max(np.abs(val[0] - val[1]).max(), np.abs(val[2] - val[1]).max()))
    return {
        "grid_shape": list(grid.shape),
        "sign_mismatches": sign_mismatch,
        "equidistant_max_diff": equi,
        "equidistant_nodes": int(both.sum()),
        "symmetry_error": symmetry,
        "c0_max_jump": jump,
        "c0_probe_offset": eps,
        "passed": sign_mismatch == 0 and equi <= 1e-9 and symmetry <= 1e-9 and jump <= eps * (1 + 1e-6) + 1e-12,
    }
