"""Command line driver.

Subcommands: ``extract``, ``simp``, ``validate-sphere``, ``validate-roof``,
``calibrate`` and ``info``. Options may also come from a TOML file given with
``--config``; its ``[<subcommand>]`` table supplies defaults that explicit
flags override (keys use the long option names, ``-`` or ``_``).

Exit codes: 0 success, 2 validation failure, 1 any other error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("simpsdf")

EXIT_OK, EXIT_ERROR, EXIT_VALIDATION = 0, 1, 2


def _levels(text):
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from exc
    if len(vals) < 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError("need at least two positive levels")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simpsdf", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="TOML file with per-command defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("extract", help="density field -> SDF -> smoothed SDF -> STL/VTK")
    src = e.add_argument_group("density source (exactly one)")
    e.add_argument("--mesh", help="mesh file (.msh text format or legacy .vtk)")
    src.add_argument("--density", help="element density file (elem_id value)")
    src.add_argument("--simp", action="store_true", help="generate densities with the built-in cantilever SIMP run")
    thr = e.add_mutually_exclusive_group()
    thr.add_argument("--rho-t", type=float, help="isocontour threshold (default 0.5)")
    thr.add_argument("--calibrate", action="store_true", help="pick the threshold that matches --vt")
    e.add_argument("--vt", type=float, help="target volume fraction of the design domain")
    e.add_argument("--match-fe-volume", action="store_true", help="target the FE isocontour volume instead of --vt")
    e.add_argument("--h", type=float, help="grid spacing (default: shortest element edge)")
    e.add_argument("--no-rbf", action="store_true", help="skip RBF smoothing (shift only)")
    e.add_argument("--refine", type=int, default=2, help="sampling refinement of the smoothed field")
    e.add_argument("--volume-tol", type=float, default=1e-3)
    e.add_argument("--threads", type=int)
    e.add_argument("--out", default="out", help="output directory")
    e.add_argument("--stl", help="STL path (default <out>/geometry.stl)")
    e.add_argument("--vtk", help="SDF VTK path (default <out>/sdf.vtk)")
    e.add_argument("--report", help="report path (default <out>/report.txt, JSON alongside)")

    s = sub.add_parser("simp", help="run the cantilever SIMP optimisation")
    s.add_argument("--nelx", type=int, default=20)
    s.add_argument("--nely", type=int, default=4)
    s.add_argument("--nelz", type=int, default=10)
    s.add_argument("--size", type=float, default=1.0, help="element edge length")
    s.add_argument("--load", type=float, default=1.0)
    s.add_argument("--volfrac", type=float, default=0.4)
    s.add_argument("--penal", type=float, default=3.0)
    s.add_argument("--rmin", type=float, help="filter radius (default 1.5 element sizes)")
    s.add_argument("--move", type=float, default=0.2)
    s.add_argument("--eta", type=float, default=0.5)
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--tol", type=float, default=0.01)
    s.add_argument("--E0", type=float, default=1.0)
    s.add_argument("--Emin", type=float, default=1e-9)
    s.add_argument("--nu", type=float, default=0.3)
    s.add_argument("--out", default="out")

    vs = sub.add_parser("validate-sphere", help="FE isocontour volume convergence on the sphere")
    vs.add_argument("--levels", type=_levels, default=[4, 8, 16, 32, 64, 128])
    vs.add_argument("--json", help="write results as JSON")

    vr = sub.add_parser("validate-roof", help="two-element roof sign and continuity checks")
    vr.add_argument("--h", type=float, default=0.1)
    vr.add_argument("--json", help="write results as JSON")

    c = sub.add_parser("calibrate", help="threshold matching a target volume fraction")
    c.add_argument("--mesh", required=False)
    c.add_argument("--density")
    c.add_argument("--vt", type=float, required=False)
    c.add_argument("--tol", type=float, default=1e-3)

    i = sub.add_parser("info", help="mesh (and density) summary")
    i.add_argument("--mesh")
    i.add_argument("--density")
    return p


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    with open(known.config, "rb") as fh:
        cfg = tomllib.load(fh)
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, table in cfg.items():
        if name not in subs.choices or not isinstance(table, dict):
            raise ValueError(f"{known.config}: unknown section [{name}]")
        sp = subs.choices[name]
        dests = {a.dest for a in sp._actions}
        clean = {k.replace("-", "_"): v for k, v in table.items()}
        unknown = set(clean) - dests
        if unknown:
            raise ValueError(f"{known.config}: unknown keys in [{name}]: {', '.join(sorted(unknown))}")
        if name == "validate-sphere" and "levels" in clean and not isinstance(clean["levels"], list):
            clean["levels"] = _levels(clean["levels"])
        sp.set_defaults(**clean)


def _load_mesh(path, density=None):
    from . import io

    if path is None:
        raise ValueError("--mesh is required")
    if str(path).lower().endswith(".vtk"):
        mesh, scalars = io.read_vtk_mesh(path)
        ids = np.arange(mesh.n_elements)
        rho = scalars.get("density")
    else:
        mesh, ids = io.read_mesh(path)
        rho = None
    if density is not None:
        rho = io.read_densities(density, ids)
    return mesh, rho


def _default_simp(args_like=None):
    from . import simp

    a = args_like
    kw = {}
    if a is not None:
        kw = dict(
            nelx=a.nelx, nely=a.nely, nelz=a.nelz, size=a.size, load=a.load, volfrac=a.volfrac,
            penal=a.penal, move=a.move, eta=a.eta, max_iter=a.max_iter, tol=a.tol,
            material=simp.Material(a.E0, a.Emin, a.nu),
        )
        if a.rmin is not None:
            kw["rmin"] = a.rmin
    return simp.cantilever_problem(**kw)


def _write_report(path, report, title):
    path = Path(path)
    lines = [title, "=" * len(title)]

    def walk(d, indent=0):
        for k, v in d.items():
            if isinstance(v, dict):
                lines.append(" " * indent + f"{k}:")
                walk(v, indent + 2)
            elif isinstance(v, float):
                lines.append(" " * indent + f"{k}: {v:.6g}")
            else:
                lines.append(" " * indent + f"{k}: {v}")

    walk(report)
    path.write_text("\n".join(lines) + "\n")
    path.with_suffix(".json").write_text(json.dumps(report, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def cmd_extract(a):
    from . import io, pipeline

    if a.simp and (a.density or a.mesh):
        raise ValueError("--simp generates its own mesh and densities; drop --mesh/--density")
    t0 = time.perf_counter()
    if a.simp:
        from . import simp

        prob = _default_simp()
        res = simp.run_simp(prob)
        mesh, rho = prob.mesh, res.densities
        simp_info = {"iterations": res.iterations, "volume_fraction": res.volume_fraction, "compliance": res.compliance[-1]}
    else:
        mesh, rho = _load_mesh(a.mesh, a.density)
        if rho is None:
            raise ValueError("no density source: give --density, a VTK mesh with cell 'density', or --simp")
        simp_info = None
    t_in = time.perf_counter() - t0
    if a.vt is None and not a.match_fe_volume and a.calibrate:
        raise ValueError("--calibrate needs --vt")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = pipeline.ExtractConfig(
        rho_t=a.rho_t if a.rho_t is not None else 0.5,
        volume_fraction=a.vt,
        calibrate=a.calibrate,
        match_fe_volume=a.match_fe_volume,
        h=a.h,
        smooth=not a.no_rbf,
        refine=a.refine,
        volume_tol=a.volume_tol,
        threads=a.threads,
        stl=a.stl or str(out / "geometry.stl"),
        vtk=a.vtk or str(out / "sdf.vtk"),
    )
    result = pipeline.extract_geometry(mesh, rho, cfg)
    rep = result.report
    rep["timing"] = {"input": t_in, **rep["timing"]}
    if simp_info:
        rep["simp"] = simp_info
    report_path = Path(a.report) if a.report else out / "report.txt"
    _write_report(report_path, rep, "simpsdf extract report")
    fr = rep["fractions"]
    print(f"rho_t = {rep['rho_t']:.6g}   shift c = {rep['shift']:.6g}")
    for k in ("fe_isocontour", "raw_sdf", "pre_shift", "post_shift", "surface"):
        print(f"  volume fraction {k:14s} {fr[k]:.6f}")
    print(f"  triangles {rep['surface']['triangles']}  watertight {rep['surface']['watertight']}")
    print(f"artifacts: {', '.join(rep['artifacts'])}; report: {report_path}")
    target = rep["target_volume"]
    if target is not None and abs(rep["volumes"]["post_shift"] - target) > a.volume_tol * target:
        io.remove_quietly(*rep["artifacts"])
        print("post-shift volume misses the target", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_simp(a):
    from . import io, simp

    prob = _default_simp(a)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = simp.run_simp(prob, callback=lambda it, C, rho: log.info("it %3d  C %.6g", it, C))
    io.write_mesh(out / "mesh.msh", prob.mesh)
    io.write_densities(out / "density.rho", res.densities)
    io.write_vtk_mesh(out / "density.vtk", prob.mesh, {"density": res.densities})
    info = {
        "iterations": res.iterations,
        "converged": res.converged,
        "volume_fraction": res.volume_fraction,
        "compliance": res.compliance,
        "change": res.change,
        "seconds": time.perf_counter() - t0,
    }
    (out / "simp.json").write_text(json.dumps(info, indent=2, default=_json_default) + "\n")
    print(f"{res.iterations} iterations, converged={res.converged}, volume fraction {res.volume_fraction:.6f}, compliance {res.compliance[-1]:.6g}")
    print(f"wrote {out / 'mesh.msh'}, {out / 'density.rho'}, {out / 'density.vtk'}")
    return EXIT_OK


def cmd_validate_sphere(a):
    from .validation import ORDER_RANGE, sphere_convergence

    r = sphere_convergence(a.levels)
    for n, v, e in zip(r["levels"], r["volumes"], r["relative_errors"]):
        print(f"N={n:4d}  V={v:.8f}  rel.err={e:.3e}")
    print(f"fitted order p = {r['order']:.4f}  (accepted {ORDER_RANGE[0]}..{ORDER_RANGE[1]}) -> {'PASS' if r['passed'] else 'FAIL'}")
    if a.json:
        Path(a.json).write_text(json.dumps(r, indent=2, default=_json_default) + "\n")
    return EXIT_OK if r["passed"] else EXIT_VALIDATION


def cmd_validate_roof(a):
    from .validation import roof_validation

    r = roof_validation(a.h)
    print(f"sign mismatches vs closed-form classifier: {r['sign_mismatches']}")
    print(f"equidistant symmetry-plane nodes: {r['equidistant_nodes']}, max difference {r['equidistant_max_diff']:.3e}")
    print(f"mirror symmetry error: {r['symmetry_error']:.3e}")
    print(f"C0 max jump across shared face (probe {r['c0_probe_offset']:g}): {r['c0_max_jump']:.3e}")
    print("PASS" if r["passed"] else "FAIL")
    if a.json:
        Path(a.json).write_text(json.dumps(r, indent=2, default=_json_default) + "\n")
    return EXIT_OK if r["passed"] else EXIT_VALIDATION


def cmd_calibrate(a):
    from . import geometry, nodal_map

    if a.vt is None:
        raise ValueError("--vt is required")
    mesh, rho = _load_mesh(a.mesh, a.density)
    if rho is None:
        raise ValueError("no density source")
    nodal = nodal_map.map_densities(mesh, rho)
    total = float(mesh.volumes.sum())
    rt = geometry.calibrate_threshold(mesh, nodal, a.vt * total, a.tol)
    v = geometry.fe_isocontour_volume(mesh, nodal, rt)
    print(f"rho_t = {rt:.6f}  volume fraction {v / total:.6f} (target {a.vt})")
    return EXIT_OK


def cmd_info(a):
    mesh, rho = _load_mesh(a.mesh, a.density)
    lo, hi = mesh.bounding_box
    counts = {}
    for et, ids, _ in mesh.blocks():
        counts[et.value] = len(ids)
    print(f"nodes {mesh.n_nodes}  elements {mesh.n_elements} {counts}")
    print(f"bounding box {lo.tolist()} .. {hi.tolist()}")
    print(f"volume {mesh.volumes.sum():.6g}  shortest edge {mesh.shortest_edge():.6g}  exterior faces {len(mesh.boundary_faces())}")
    if rho is not None:
        vf = float(mesh.volumes @ rho / mesh.volumes.sum())
        print(f"density min {rho.min():.4g} max {rho.max():.4g} volume fraction {vf:.6f}")
    return EXIT_OK


COMMANDS = {
    "extract": cmd_extract,
    "simp": cmd_simp,
    "validate-sphere": cmd_validate_sphere,
    "validate-roof": cmd_validate_roof,
    "calibrate": cmd_calibrate,
    "info": cmd_info,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (OSError, ValueError, tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        if args.verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
