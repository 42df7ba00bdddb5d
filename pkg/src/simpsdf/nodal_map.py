"""Element-to-node density mapping by local least-squares linear fits.

For a node ``x_a`` with neighbouring element centroids ``c_1..c_m`` and
densities ``rho_1..rho_m`` the affine model ``rho(x) = a0 + a . (x - x_a)`` is
fitted in the least-squares sense and evaluated at the node, which gives
``a0``. Coordinates are centred on the node and scaled by the mean neighbour
distance so that the normal equations stay well conditioned for any unit
system.
"""
from __future__ import annotations

import numpy as np

from .mesh import UnstructuredMesh

COND_LIMIT = 1e10
JITTER = 1e-12


def _idw(node, centroids, dens):
    d = np.linalg.norm(centroids - node[..., None, :], axis=-1)
    if d.ndim == 1:
        d = d[None]
        dens = dens[None]
    out = np.empty(d.shape[0])
    zero = np.any(d <= 0.0, axis=1)
    # a centroid coinciding with the node gets all of the weight
    if zero.any():
        hit = d[zero] <= 0.0
        out[zero] = np.sum(np.where(hit, dens[zero], 0.0), axis=1) / hit.sum(axis=1)
    w = 1.0 / np.where(d[~zero] > 0, d[~zero], 1.0)
    out[~zero] = np.sum(w * dens[~zero], axis=1) / w.sum(axis=1)
    return out


def _fit_batch(nodes, centroids, dens):
    """Raw (unclamped) fitted values for ``B`` nodes sharing the same neighbour count.

    Returns ``(values, fitted)``; rows that needed the fallback have
    ``fitted == False``.
    """
    nb, m, _ = centroids.shape
    if m < 4:
        return _idw(nodes, centroids, dens), np.zeros(nb, dtype=bool)
    rel = centroids - nodes[:, None, :]
    scale = np.mean(np.linalg.norm(rel, axis=-1), axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    X = np.concatenate([np.ones((nb, m, 1)), rel / scale[:, None, None]], axis=-1)
    A = np.einsum("bmi,bmj->bij", X, X)
    rhs = np.einsum("bmi,bm->bi", X, dens)
    vals = np.empty(nb)
    fitted = np.zeros(nb, dtype=bool)
    try:
        Ls = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        Ls = [None] * nb
    for b in range(nb) if isinstance(Ls, list) else ():
        try:
            Ls[b] = np.linalg.cholesky(A[b])
        except np.linalg.LinAlgError:
            try:
                Ls[b] = np.linalg.cholesky(A[b] + JITTER * np.trace(A[b]) * np.eye(4))
            except np.linalg.LinAlgError:
                Ls[b] = np.zeros((4, 4))
    Ls = np.asarray(Ls)
    diag = np.diagonal(Ls, axis1=1, axis2=2)
    dmin = diag.min(axis=1)
    ok = dmin > 0
    ok[ok] = (diag[ok].max(axis=1) / dmin[ok]) ** 2 < COND_LIMIT
    if ok.any():
        y = np.linalg.solve(Ls[ok], rhs[ok][..., None])
        a = np.linalg.solve(np.swapaxes(Ls[ok], 1, 2), y)[..., 0]
        vals[ok] = a[:, 0]
        fitted[ok] = True
    if not fitted.all():
        bad = ~fitted
        vals[bad] = _idw(nodes[bad], centroids[bad], dens[bad])
    return vals, fitted


def fit_nodal_density(node_coord, neighbor_centroids, neighbor_densities, clamp: bool = True) -> float:
    """Least-squares affine fit of neighbour densities evaluated at ``node_coord``.

    With fewer than four neighbours, or a nearly singular fit (coplanar
    centroids, condition estimate ``>= 1e10``), an inverse-distance-weighted
    average is used instead. The result is clamped to ``[0, 1]`` unless
    ``clamp`` is false.
    """
    c = np.atleast_2d(np.asarray(neighbor_centroids, dtype=float))
    r = np.atleast_1d(np.asarray(neighbor_densities, dtype=float))
    if c.shape[0] != r.shape[0] or c.shape[0] == 0:
        raise ValueError("need at least one neighbour with matching densities")
    val, _ = _fit_batch(np.asarray(node_coord, dtype=float)[None], c[None], r[None])
    v = float(val[0])
    return min(1.0, max(0.0, v)) if clamp else v


def map_densities(mesh: UnstructuredMesh, element_densities, clamp: bool = True, return_fitted: bool = False):
    """Nodal densities from element densities (one local fit per node).

    Nodes are batched by neighbour count; every node is computed
    independently of the others, so the result does not depend on order.
    """
    rho_e = np.asarray(element_densities, dtype=float)
    if rho_e.shape != (mesh.n_elements,):
        raise ValueError(f"expected {mesh.n_elements} element densities, got shape {rho_e.shape}")
    offsets, ids = mesh.node_elements
    counts = np.diff(offsets)
    cent = mesh.centroids
    out = np.zeros(mesh.n_nodes)
    fitted = np.zeros(mesh.n_nodes, dtype=bool)
    orphan = counts == 0
    if orphan.any():
        raise ValueError(f"{int(orphan.sum())} nodes are not referenced by any element")
    for m in np.unique(counts):
        nodes = np.flatnonzero(counts == m)
        take = offsets[nodes][:, None] + np.arange(m)
        nb = ids[take]
        out[nodes], fitted[nodes] = _fit_batch(mesh.nodes[nodes], cent[nb], rho_e[nb])
    if clamp:
        np.clip(out, 0.0, 1.0, out=out)
    return (out, fitted) if return_fitted else out
