"""File output: legacy VTK fields, a versioned mesh dump, and CSV tables.

All floats are written with 17 significant digits so files read back to
the same doubles, and nothing time- or host-dependent goes into them, so
identical inputs give byte-identical files.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .fem import FeSpace
from .mesh import BoundaryTag, Mesh

__all__ = [
    "MESH_FORMAT",
    "MESH_VERSION",
    "write_vtk",
    "read_vtk",
    "write_mesh_vtk",
    "dump_mesh",
    "load_mesh_dump",
    "write_csv",
    "read_csv",
]

MESH_FORMAT = "flowassim-mesh"
MESH_VERSION = 1

VTK_LINE, VTK_TRIANGLE = 3, 5


def _fmt(a) -> str:
    return " ".join("%.17g" % v for v in np.ravel(a))


def _vtk_lines(mesh: Mesh, point_data: dict, cell_data: dict, title: str):
    v = mesh.vertices
    tri = mesh.triangles
    wall = mesh.edges_with_tag(BoundaryTag.WALL)
    n_cells = len(tri) + len(wall)
    out = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII",
           "DATASET UNSTRUCTURED_GRID", f"POINTS {len(v)} double"]
    out += [_fmt((x, y, 0.0)) for x, y in v]
    out.append(f"CELLS {n_cells} {4 * len(tri) + 3 * len(wall)}")
    out += [f"3 {a} {b} {c}" for a, b, c in tri]
    out += [f"2 {a} {b}" for a, b in wall]
    out.append(f"CELL_TYPES {n_cells}")
    out += [str(VTK_TRIANGLE)] * len(tri) + [str(VTK_LINE)] * len(wall)
    for header, count, data in (("POINT_DATA", len(v), point_data), ("CELL_DATA", n_cells, cell_data)):
        if not data:
            continue
        out.append(f"{header} {count}")
        for name, arr in data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 2:
                if arr.shape != (count, 3):
                    raise ValueError(f"vector field {name} has shape {arr.shape}")
                out.append(f"VECTORS {name} double")
                out += [_fmt(r) for r in arr]
            else:
                if arr.shape != (count,):
                    raise ValueError(f"scalar field {name} has shape {arr.shape}")
                out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                out += ["%.17g" % x for x in arr]
    return out


def write_mesh_vtk(path, mesh: Mesh, title: str = "flowassim mesh") -> None:
    Path(path).write_text("\n".join(_vtk_lines(mesh, {}, {}, title)) + "\n")


def write_vtk(path, space: FeSpace, U, P, wss=None, title: str = "flowassim fields") -> None:
    """Velocity (vector and magnitude) and pressure at the mesh vertices, WSS on wall cells.

    Triangle cells carry NaN in the ``wss`` cell array; the wall line cells
    follow the triangles in the order of the mesh's wall edges.
    """
    U = np.asarray(U, dtype=float)
    P = np.asarray(P, dtype=float)
    if U.size == 0 or P.size == 0:
        raise ValueError("empty state")
    if U.shape != (space.n_u,) or P.shape != (space.n_p,):
        raise ValueError("state does not match the space")
    mesh = space.mesh
    nv = mesh.n_vertices
    vel = np.zeros((nv, 3))
    vel[:, 0] = U[:nv]
    vel[:, 1] = U[space.n_nodes: space.n_nodes + nv]
    point_data = {"velocity": vel, "velocity_magnitude": np.hypot(vel[:, 0], vel[:, 1]),
                  "pressure": P}
    cell_data = {}
    if wss is not None:
        nw = len(mesh.edges_with_tag(BoundaryTag.WALL))
        wss = np.asarray(wss, dtype=float)
        if wss.shape != (nw,):
            raise ValueError(f"wss has {wss.shape} entries, mesh has {nw} wall edges")
        cell_data["wss"] = np.concatenate([np.full(mesh.n_triangles, np.nan), wss])
    Path(path).write_text("\n".join(_vtk_lines(mesh, point_data, cell_data, title)) + "\n")


def read_vtk(path) -> dict:
    """Parse the legacy-VTK subset written by this module.

    Returns a dict with ``points`` (n, 3), ``cells`` (list of index tuples),
    ``cell_types``, ``point_data`` and ``cell_data`` (name -> array).
    """
    tokens = Path(path).read_text().split("\n")
    lines = iter(tokens[3:])
    out = {"title": tokens[1], "point_data": {}, "cell_data": {}}
    section = None
    counts = {}

    def take(n):
        return [next(lines) for _ in range(n)]

    for line in lines:
        words = line.split()
        if not words:
            continue
        key = words[0]
        if key == "DATASET":
            if words[1] != "UNSTRUCTURED_GRID":
                raise ValueError(f"unsupported dataset {words[1]}")
        elif key == "POINTS":
            out["points"] = np.array([[float(x) for x in r.split()] for r in take(int(words[1]))])
        elif key == "CELLS":
            out["cells"] = [tuple(int(x) for x in r.split()[1:]) for r in take(int(words[1]))]
        elif key == "CELL_TYPES":
            out["cell_types"] = np.array([int(r) for r in take(int(words[1]))])
        elif key in ("POINT_DATA", "CELL_DATA"):
            section = "point_data" if key == "POINT_DATA" else "cell_data"
            counts[section] = int(words[1])
        elif key == "SCALARS":
            next(lines)  # LOOKUP_TABLE
            out[section][words[1]] = np.array([float(r) for r in take(counts[section])])
        elif key == "VECTORS":
            out[section][words[1]] = np.array([[float(x) for x in r.split()] for r in take(counts[section])])
        else:
            raise ValueError(f"unexpected VTK keyword {key!r}")
    return out


def dump_mesh(path, mesh: Mesh) -> None:
    """Versioned JSON dump of a mesh (exact float round trip)."""
    doc = {
        "format": MESH_FORMAT,
        "version": MESH_VERSION,
        "h_max": mesh.h_max,
        "vertices": mesh.vertices.tolist(),
        "triangles": mesh.triangles.tolist(),
        "boundary_edges": mesh.boundary_edges.tolist(),
        "boundary_tags": [BoundaryTag(t).name for t in mesh.boundary_tags],
        "sections": {str(k): {"station": float(mesh.section_stations[k]), "edges": e.tolist()}
                     for k, e in sorted(mesh.section_edges.items())},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_mesh_dump(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MESH_FORMAT:
        raise ValueError(f"{path}: not a mesh dump")
    if doc.get("version") != MESH_VERSION:
        raise ValueError(f"{path}: unsupported mesh dump version {doc.get('version')}")
    return {
        "h_max": doc["h_max"],
        "vertices": np.array(doc["vertices"], dtype=float).reshape(-1, 2),
        "triangles": np.array(doc["triangles"], dtype=np.int64).reshape(-1, 3),
        "boundary_edges": np.array(doc["boundary_edges"], dtype=np.int64).reshape(-1, 2),
        "boundary_tags": np.array([BoundaryTag[t] for t in doc["boundary_tags"]], dtype=np.int64),
        "sections": {int(k): (v["station"], np.array(v["edges"], dtype=np.int64).reshape(-1, 2))
                     for k, v in doc["sections"].items()},
    }


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return v


def write_csv(path, rows, columns) -> None:
    """RFC 4180 table (CRLF line ends, minimal quoting)."""
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\r\n", extrasaction="ignore")
        wr.writeheader()
        for r in rows:
            wr.writerow({c: _cell(r.get(c, "")) for c in columns})


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
