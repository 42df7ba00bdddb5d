"""Gaussian RBF interpolation of a grid SDF and the volume-preserving level shift.

Centres are grid nodes, so the truncated interaction matrix is a
convolution with a small lattice stencil; ``A s = phi`` is solved matrix-free
by conjugate gradients. Evaluating the interpolant on a grid refined by an
integer factor is again a convolution (of the zero-upsampled weights).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla
from scipy import ndimage

from .geometry import grid_isocontour_volume
from .sdf import CartesianGrid, SdfField

CUTOFF_FACTOR = 3.8


def gaussian(r, B):
    return np.exp(-((np.asarray(r, dtype=float) / B) ** 2))


def _stencil(step: float, B: float, cutoff: float) -> np.ndarray:
    """Kernel values on a lattice of spacing ``step``, zero beyond ``cutoff``."""
    R = int(np.floor(cutoff / step + 1e-9))
    o = np.arange(-R, R + 1) * step
    r = np.sqrt(o[:, None, None] ** 2 + o[None, :, None] ** 2 + o[None, None, :] ** 2)
    return np.where(r <= cutoff * (1 + 1e-12), gaussian(r, B), 0.0)


@dataclass
class RbfModel:
    grid: CartesianGrid
    weights: np.ndarray
    B: float
    cutoff: float
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.B > 0:
            raise ValueError("shape parameter must be positive")
        self.weights = np.asarray(self.weights, dtype=float).reshape(self.grid.shape)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("non-finite RBF weights")

    def apply(self, v) -> np.ndarray:
        """Truncated interaction matrix times a grid vector."""
        K = _stencil(self.grid.spacing, self.B, self.cutoff)
        return ndimage.correlate(np.asarray(v, dtype=float).reshape(self.grid.shape), K, mode="constant", cval=0.0)

    def residual(self, phi) -> float:
        return float(np.abs(self.apply(self.weights) - np.asarray(phi).reshape(self.grid.shape)).max())


def fit_rbf(sdf: SdfField, B: float | None = None, cutoff_factor: float = CUTOFF_FACTOR, rtol: float = 1e-8) -> RbfModel:
    """Weights ``s`` with ``A s = phi``; ``B`` defaults to the grid spacing.

    The CG solve is retried with a ``1e-10`` diagonal shift if it stalls; the
    fit must reproduce ``phi`` to ``rtol * max|phi|`` at every centre.
    """
    phi = np.asarray(sdf.values, dtype=float)
    if not np.all(np.isfinite(phi)):
        raise ValueError("SDF contains non-finite values")
    grid = sdf.grid
    B = grid.spacing if B is None else float(B)
    cutoff = cutoff_factor * B
    K = _stencil(grid.spacing, B, cutoff)
    shape = grid.shape
    n = phi.size
    scale = float(np.abs(phi).max())
    if scale == 0.0:
        return RbfModel(grid, np.zeros(shape), B, cutoff, {"cg_iterations": 0, "residual": 0.0})
    b = phi.ravel()
    counter = {"it": 0}

    def cb(_):
        counter["it"] += 1

    for shift in (0.0, 1e-10):
        A = spla.LinearOperator(
            (n, n),
            matvec=lambda v, s=shift: ndimage.correlate(v.reshape(shape), K, mode="constant", cval=0.0).ravel() + s * v,
            dtype=float,
        )
        s, info = spla.cg(A, b, rtol=1e-13, atol=0.0, maxiter=10 * n + 100, callback=cb)
        model = RbfModel(grid, s, B, cutoff, {"cg_iterations": counter["it"], "regularization": shift})
        res = model.residual(phi)
        model.info["residual"] = res
        if np.all(np.isfinite(s)) and res < rtol * scale:
            return model
    raise RuntimeError(f"RBF fit did not converge (residual {res:.3g}, max|phi| {scale:.3g})")


def evaluate_smoothed(model: RbfModel, x) -> np.ndarray:
    """Interpolant at arbitrary points ``x (..., 3)`` (zero beyond every centre's cutoff)."""
    x = np.asarray(x, dtype=float)
    shp = x.shape[:-1]
    pts = x.reshape(-1, 3)
    g = model.grid
    h = g.spacing
    R = int(np.ceil(model.cutoff / h)) + 1
    off = np.stack(np.meshgrid(*(np.arange(-R, R + 1),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.zeros(len(pts))
    o = np.asarray(g.origin)
    dims = np.asarray(g.shape)
    for s in range(0, len(pts), 2000):
        p = pts[s : s + 2000]
        base = np.floor((p - o) / h).astype(np.int64)
        idx = base[:, None, :] + off[None]
        inside = np.all((idx >= 0) & (idx < dims), axis=-1)
        idc = np.clip(idx, 0, dims - 1)
        r = np.linalg.norm(o + idc * h - p[:, None, :], axis=-1)
        w = model.weights[idc[..., 0], idc[..., 1], idc[..., 2]]
        k = np.where(inside & (r <= model.cutoff), gaussian(r, model.B), 0.0)
        out[s : s + 2000] = np.sum(w * k, axis=1)
    return out.reshape(shp)


def resample(model: RbfModel, factor: int = 1) -> SdfField:
    """Interpolant on the grid refined by ``factor`` (same origin and extent)."""
    factor = int(factor)
    fine = model.grid.refined(factor)
    if factor == 1:
        return SdfField(fine, model.apply(model.weights))
    up = np.zeros(fine.shape)
    up[::factor, ::factor, ::factor] = model.weights
    K = _stencil(fine.spacing, model.B, model.cutoff)
    return SdfField(fine, ndimage.correlate(up, K, mode="constant", cval=0.0))


def volume_shift(field_or_model, v_target: float, tol: float = 1e-3, bracket: float = 3.0, max_widen: int = 6, history=None) -> float:
    """Uniform shift ``c`` so that ``{phi + c >= 0}`` encloses ``v_target``.

    Accepts an :class:`RbfModel` (evaluated on its own grid) or a resampled
    :class:`SdfField`. Bisection starts on ``[-bracket h, +bracket h]`` and
    doubles the bracket when the target is outside it.
    """
    if isinstance(field_or_model, RbfModel):
        field_or_model = resample(field_or_model, 1)
    phi = np.asarray(field_or_model.values)
    h = field_or_model.grid.spacing
    if not v_target > 0:
        raise ValueError("target volume must be positive")

    def vol(c):
        return grid_isocontour_volume(phi + c, 0.0, h)

    half = bracket * h
    for _ in range(max_widen + 1):
        lo, hi = -half, half
        v_lo, v_hi = vol(lo), vol(hi)
        if v_lo <= v_target <= v_hi:
            break
        half *= 2.0
    else:
        raise RuntimeError(
            f"volume shift bracket exhausted: V({-half / 2:.3g})={v_lo:.6g}, V({half / 2:.3g})={v_hi:.6g}, target {v_target:.6g}"
        )
    c = 0.5 * (lo + hi)
    for _ in range(200):
        c = 0.5 * (lo + hi)
        vc = vol(c)
        if history is not None:
            history.append((c, vc))
        if not v_lo - 1e-12 * v_target <= vc <= v_hi + 1e-12 * v_target:
            raise RuntimeError("enclosed volume is not monotone in the shift")
        if abs(vc - v_target) <= 1e-2 * tol * v_target or hi - lo <= 1e-14 * h:
            break
        if vc < v_target:
            lo, v_lo = c, vc
        else:
            hi, v_hi = c, vc
    if abs(vol(c) - v_target) > tol * v_target:
        raise RuntimeError(f"volume shift did not reach tolerance (V={vol(c):.6g}, target {v_target:.6g})")
    return c


def smooth_sdf(sdf: SdfField, v_target: float | None = None, refine: int = 2, tol: float = 1e-3, B: float | None = None) -> SdfField:
    """RBF-smoothed field, sampled on the grid refined by ``refine``, shifted to ``v_target``.

    With ``refine=1`` the result lives on the input grid; since the
    interpolant reproduces the centre values exactly there, only the shift
    changes it. ``v_target=None`` keeps the volume of the smoothed field.
    """
    model = fit_rbf(sdf, B=B)
    out = resample(model, refine)
    v0 = grid_isocontour_volume(out)
    c = 0.0 if v_target is None else volume_shift(out, v_target, tol)
    out = SdfField(out.grid, out.values + c, band=sdf.band)
    out.info = {
        "shift": c,
        "volume_smoothed": v0,
        "volume_shifted": grid_isocontour_volume(out),
        "rbf_residual": model.info.get("residual", 0.0),
        "cg_iterations": model.info.get("cg_iterations", 0),
        "refine": refine,
    }
    return out
