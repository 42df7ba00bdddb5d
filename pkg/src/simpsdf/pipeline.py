"""End-to-end extraction: element densities -> nodal field -> SDF -> smoothing -> surface."""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, io, nodal_map, rbf, sdf
from .mesh import UnstructuredMesh


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass
class ExtractConfig:
    rho_t: float | None = 0.5
    volume_fraction: float | None = None
    calibrate: bool = False
    match_fe_volume: bool = False
    h: float | None = None
    smooth: bool = True
    refine: int = 2
    volume_tol: float = 1e-3
    threads: int | None = None
    stl: str | None = None
    vtk: str | None = None

    def __post_init__(self):
        if self.calibrate and self.volume_fraction is None:
            raise ValueError("threshold calibration needs a target volume fraction")
        if self.volume_fraction is not None and not 0 < self.volume_fraction <= 1:
            raise ValueError("target volume fraction must lie in (0, 1]")
        if not self.calibrate and self.rho_t is None:
            raise ValueError("either a threshold or calibration must be given")


@dataclass
class ExtractResult:
    nodal: np.ndarray
    rho_t: float
    raw_sdf: sdf.SdfField
    field: sdf.SdfField
    surface: geometry.TriangleSurface
    report: dict = field(default_factory=dict)


@contextmanager
def _stage(name, timings):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = time.perf_counter() - t0


def extract_geometry(mesh: UnstructuredMesh, element_rho, cfg: ExtractConfig) -> ExtractResult:
    """Run every stage and write the requested artifacts.

    Artifacts already written are removed if a later stage fails.
    """
    t = {}
    domain = float(mesh.volumes.sum())
    written = []
    try:
        with _stage("nodal_map", t):
            nodal = nodal_map.map_densities(mesh, element_rho)
        v_target = None if cfg.volume_fraction is None else cfg.volume_fraction * domain
        with _stage("threshold", t):
            rho_t = geometry.calibrate_threshold(mesh, nodal, v_target, cfg.volume_tol) if cfg.calibrate else cfg.rho_t
            v_fe = geometry.fe_isocontour_volume(mesh, nodal, rho_t)
        if cfg.match_fe_volume:
            v_target = v_fe
        with _stage("grid", t):
            grid = sdf.build_grid(mesh, cfg.h)
        with _stage("sdf", t):
            raw = sdf.build_sdf(mesh, nodal, rho_t, grid, threads=cfg.threads)
            v_raw = geometry.grid_isocontour_volume(raw)
        with _stage("smooth", t):
            if cfg.smooth:
                smooth = rbf.smooth_sdf(raw, v_target, refine=cfg.refine, tol=cfg.volume_tol)
                v_pre = smooth.info["volume_smoothed"]
            else:
                smooth = raw
                v_pre = v_raw
                if v_target is not None:
                    c = rbf.volume_shift(raw, v_target, cfg.volume_tol)
                    smooth = sdf.SdfField(raw.grid, raw.values + c, band=raw.band, info={"shift": c})
            v_post = geometry.grid_isocontour_volume(smooth)
        with _stage("surface", t):
            surf = geometry.marching_cubes(smooth, 0.0)
            v_surf = surf.enclosed_volume()
        with _stage("export", t):
            if cfg.vtk:
                io.export_grid_vtk(smooth, cfg.vtk)
                written.append(cfg.vtk)
            if cfg.stl:
                io.export_surface_stl(surf, cfg.stl)
                written.append(cfg.stl)
    except Exception:
        io.remove_quietly(*written)
        raise
    report = {
        "rho_t": float(rho_t),
        "domain_volume": domain,
        "target_volume": v_target,
        "volumes": {
            "fe_isocontour": v_fe,
            "raw_sdf": v_raw,
            "pre_shift": v_pre,
            "post_shift": v_post,
            "surface": v_surf,
        },
        "fractions": {k: v / domain for k, v in (("fe_isocontour", v_fe), ("raw_sdf", v_raw), ("pre_shift", v_pre), ("post_shift", v_post), ("surface", v_surf))},
        "shift": float(smooth.info.get("shift", 0.0)),
        "grid": {"origin": list(grid.origin), "spacing": grid.spacing, "shape": list(grid.shape)},
        "field_grid": {"spacing": smooth.grid.spacing, "shape": list(smooth.grid.shape)},
        "sdf": {k: v for k, v in raw.info.items()},
        "surface": {"triangles": surf.n_triangles, "watertight": surf.is_watertight(), "open_boundary": surf.open_boundary},
        "timing": t,
        "artifacts": [str(Path(p)) for p in written],
    }
    return ExtractResult(nodal, float(rho_t), raw, smooth, surf, report)
