"""File formats: meshes, density fields, grid SDFs and surfaces.

Mesh text format (one record per line, ``#`` starts a comment)::

    node <id> <x> <y> <z>
    elem <id> <HEX8|TET4> <node ids ...>

Ids are arbitrary integers; they are mapped to consecutive indices in file
order. Node order inside an element follows the VTK convention. Density text
format: ``<elem id> <value>`` per line, same comment rule.

Legacy VTK (ASCII) is supported for unstructured meshes with a cell scalar
``density`` (cell types 12 = hexahedron, 10 = tetrahedron) and for grid
fields as STRUCTURED_POINTS with a point scalar ``phi``. Grid values are
written one per line with ``%.17g`` and x varying fastest, so a read-back
reproduces the doubles exactly.

Binary STL: 80-byte header, uint32 facet count, then per facet 12 float32
(normal, three vertices) and a uint16 attribute, all little-endian.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .geometry import TriangleSurface
from .mesh import ElementType, UnstructuredMesh
from .sdf import CartesianGrid, SdfField

STL_HEADER = b"simpsdf binary STL".ljust(80, b" ")
STL_DTYPE = np.dtype([("normal", "<f4", (3,)), ("v", "<f4", (3, 3)), ("attr", "<u2")])
VTK_CELL = {ElementType.HEX8: 12, ElementType.TET4: 10}
VTK_CELL_INV = {v: k for k, v in VTK_CELL.items()}


class FormatError(ValueError):
    """Malformed input file; the message carries path and line number."""


def _lines(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield no, line.split()


def _write_text(path, text):
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------- text mesh


def read_mesh(path):
    """Read the text mesh format; returns ``(mesh, element_ids)``."""
    node_ids, coords, elem_ids, etypes, conns = {}, [], [], [], []
    for no, tok in _lines(path):
        try:
            if tok[0] == "node":
                if len(tok) != 5:
                    raise ValueError("expected 'node id x y z'")
                nid = int(tok[1])
                if nid in node_ids:
                    raise ValueError(f"duplicate node id {nid}")
                node_ids[nid] = len(coords)
                coords.append([float(v) for v in tok[2:5]])
            elif tok[0] == "elem":
                et = ElementType(tok[2].upper())
                refs = [int(v) for v in tok[3:]]
                if len(refs) != et.n_nodes:
                    raise ValueError(f"{et.value} needs {et.n_nodes} nodes, got {len(refs)}")
                elem_ids.append(int(tok[1]))
                etypes.append(et)
                conns.append(refs)
            else:
                raise ValueError(f"unknown record '{tok[0]}'")
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{no}: {exc}") from exc
    if len(set(elem_ids)) != len(elem_ids):
        raise FormatError(f"{path}: duplicate element ids")
    try:
        elements = [(et, [node_ids[r] for r in refs]) for et, refs in zip(etypes, conns)]
    except KeyError as exc:
        raise FormatError(f"{path}: element references unknown node {exc.args[0]}") from exc
    return UnstructuredMesh(np.asarray(coords, dtype=float).reshape(-1, 3), elements), np.asarray(elem_ids, dtype=np.int64)


def write_mesh(path, mesh: UnstructuredMesh, element_ids=None):
    lines = ["# simpsdf mesh"]
    lines += [f"node {i} {x:.17g} {y:.17g} {z:.17g}" for i, (x, y, z) in enumerate(mesh.nodes)]
    ids = range(mesh.n_elements) if element_ids is None else element_ids
    for e, eid in zip(range(mesh.n_elements), ids):
        lines.append(f"elem {eid} {mesh.element_type(e).value} " + " ".join(str(n) for n in mesh.element_nodes(e)))
    _write_text(path, "\n".join(lines) + "\n")


def read_densities(path, element_ids=None) -> np.ndarray:
    """Element densities in mesh order (``element_ids`` maps file ids to positions)."""
    vals = {}
    for no, tok in _lines(path):
        try:
            if len(tok) != 2:
                raise ValueError("expected '<elem id> <value>'")
            vals[int(tok[0])] = float(tok[1])
        except ValueError as exc:
            raise FormatError(f"{path}:{no}: {exc}") from exc
    if element_ids is None:
        element_ids = np.arange(len(vals))
    try:
        rho = np.array([vals[int(e)] for e in element_ids])
    except KeyError as exc:
        raise FormatError(f"{path}: no density for element {exc.args[0]}") from exc
    if len(vals) != len(element_ids):
        raise FormatError(f"{path}: {len(vals)} densities for {len(element_ids)} elements")
    if np.any(~np.isfinite(rho)) or np.any((rho < 0) | (rho > 1)):
        raise FormatError(f"{path}: densities must lie in [0, 1]")
    return rho


def write_densities(path, rho, element_ids=None):
    rho = np.asarray(rho, dtype=float)
    ids = np.arange(len(rho)) if element_ids is None else element_ids
    _write_text(path, "# elem_id density\n" + "".join(f"{i} {v:.17g}\n" for i, v in zip(ids, rho)))


# ----------------------------------------------------- legacy VTK (unstructured)


def write_vtk_mesh(path, mesh: UnstructuredMesh, cell_data: dict | None = None):
    n = mesh.n_elements
    out = ["# vtk DataFile Version 3.0", "simpsdf mesh", "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {mesh.n_nodes} double")
    out += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.nodes]
    cells = [mesh.element_nodes(e) for e in range(n)]
    out.append(f"CELLS {n} {sum(len(c) + 1 for c in cells)}")
    out += [f"{len(c)} " + " ".join(map(str, c)) for c in cells]
    out.append(f"CELL_TYPES {n}")
    out += [str(VTK_CELL[mesh.element_type(e)]) for e in range(n)]
    if cell_data:
        out.append(f"CELL_DATA {n}")
        for name, vals in cell_data.items():
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [f"{v:.17g}" for v in np.asarray(vals, dtype=float)]
    _write_text(path, "\n".join(out) + "\n")


def read_vtk_mesh(path):
    """Legacy-VTK ASCII unstructured grid; returns ``(mesh, cell_scalars)``."""
    toks = [t for _, line in _lines(path) for t in line]
    # the header line starts with '#', so the comment filter already dropped it
    pos = 0

    def take(k=1):
        nonlocal pos
        if pos + k > len(toks):
            raise FormatError(f"{path}: unexpected end of file")
        v = toks[pos : pos + k]
        pos += k
        return v

    try:
        while toks[pos].upper() != "DATASET":
            pos += 1
        take()
        if take()[0].upper() != "UNSTRUCTURED_GRID":
            raise FormatError(f"{path}: only UNSTRUCTURED_GRID is supported")
        nodes = cells = types = None
        scalars = {}
        section_n = None
        while pos < len(toks):
            key = take()[0].upper()
            if key == "POINTS":
                npt = int(take()[0])
                take()
                nodes = np.array(take(3 * npt), dtype=float).reshape(npt, 3)
            elif key == "CELLS":
                nc, size = int(take()[0]), int(take()[0])
                flat = np.array(take(size), dtype=np.int64)
                cells, i = [], 0
                while i < size:
                    k = flat[i]
                    cells.append(flat[i + 1 : i + 1 + k].tolist())
                    i += k + 1
                if len(cells) != nc:
                    raise FormatError(f"{path}: CELLS count mismatch")
            elif key == "CELL_TYPES":
                types = [int(v) for v in take(int(take()[0]))]
            elif key in ("CELL_DATA", "POINT_DATA"):
                section_n = (key, int(take()[0]))
            elif key == "SCALARS":
                name = take()[0]
                take()
                if pos < len(toks) and toks[pos].isdigit():
                    take()
                if toks[pos].upper() == "LOOKUP_TABLE":
                    take(2)
                if section_n is None:
                    raise FormatError(f"{path}: SCALARS outside a data section")
                vals = np.array(take(section_n[1]), dtype=float)
                if section_n[0] == "CELL_DATA":
                    scalars[name] = vals
            else:
                raise FormatError(f"{path}: unsupported keyword {key}")
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if nodes is None or cells is None or types is None:
        raise FormatError(f"{path}: missing POINTS, CELLS or CELL_TYPES")
    try:
        elements = [(VTK_CELL_INV[t], c) for t, c in zip(types, cells)]
    except KeyError as exc:
        raise FormatError(f"{path}: unsupported cell type {exc.args[0]}") from exc
    return UnstructuredMesh(nodes, elements), scalars


# ----------------------------------------------------- legacy VTK (grid field)


def export_grid_vtk(sdf: SdfField, path, name: str = "phi"):
    g = sdf.grid
    vals = np.asarray(sdf.values, dtype=float).ravel(order="F")
    head = [
        "# vtk DataFile Version 3.0",
        "simpsdf signed distance field",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS {} {} {}".format(*g.shape),
        "ORIGIN {:.17g} {:.17g} {:.17g}".format(*g.origin),
        f"SPACING {g.spacing:.17g} {g.spacing:.17g} {g.spacing:.17g}",
        f"POINT_DATA {vals.size}",
        f"SCALARS {name} double 1",
        "LOOKUP_TABLE default",
    ]
    _write_text(path, "\n".join(head) + "\n" + "\n".join(f"{v:.17g}" for v in vals) + "\n")


def read_grid_vtk(path) -> SdfField:
    toks = [t for _, line in _lines(path) for t in line]
    try:
        i = [t.upper() for t in toks].index("DIMENSIONS")
        dims = tuple(int(v) for v in toks[i + 1 : i + 4])
        i = [t.upper() for t in toks].index("ORIGIN")
        origin = tuple(float(v) for v in toks[i + 1 : i + 4])
        i = [t.upper() for t in toks].index("SPACING")
        sp = [float(v) for v in toks[i + 1 : i + 4]]
        i = [t.upper() for t in toks].index("LOOKUP_TABLE")
        vals = np.array(toks[i + 2 : i + 2 + int(np.prod(dims))], dtype=float)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if len(set(sp)) != 1:
        raise FormatError(f"{path}: anisotropic spacing is not supported")
    if vals.size != int(np.prod(dims)):
        raise FormatError(f"{path}: expected {int(np.prod(dims))} values, found {vals.size}")
    grid = CartesianGrid(origin, sp[0], dims)
    return SdfField(grid, vals.reshape(dims, order="F"))


# ---------------------------------------------------------------------- STL


def export_surface_stl(surface: TriangleSurface, path):
    n = surface.n_triangles
    rec = np.zeros(n, dtype=STL_DTYPE)
    if n:
        rec["normal"] = surface.normals
        rec["v"] = surface.vertices[surface.triangles]
    try:
        with open(path, "wb") as fh:
            fh.write(STL_HEADER)
            fh.write(np.uint32(n).astype("<u4").tobytes())
            fh.write(rec.tobytes())
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def read_stl(path) -> TriangleSurface:
    """Binary STL as an unwelded triangle soup (3 vertices per facet)."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    if len(data) < 84:
        raise FormatError(f"{path}: truncated STL header")
    n = int(np.frombuffer(data[80:84], dtype="<u4")[0])
    if len(data) != 84 + 50 * n:
        raise FormatError(f"{path}: expected {84 + 50 * n} bytes, found {len(data)}")
    rec = np.frombuffer(data[84:], dtype=STL_DTYPE, count=n)
    verts = rec["v"].reshape(-1, 3).astype(float)
    return TriangleSurface(verts, np.arange(3 * n).reshape(-1, 3))


def remove_quietly(*paths):
    for p in paths:
        try:
            os.remove(p)
        except OSError:
            pass
