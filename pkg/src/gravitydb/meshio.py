"""PLY / OBJ reading and writing.

PLY is read in ASCII or binary form through ``plyfile``; it is always written
binary little-endian with float32 ``x,y,z`` (and ``nx,ny,nz`` when normals
exist), an optional int32 ``label`` property and ``vertex_indices`` faces.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .errors import MissingFile, ParseError
from .geometry import UNIT_TOL, norm3, unit


@dataclass
class RawGeometry:
    points: np.ndarray
    normals: np.ndarray | None = None
    faces: np.ndarray | None = None
    labels: np.ndarray | None = None


def _clean_normals(n: np.ndarray | None) -> np.ndarray | None:
    if n is None:
        return None
    n = np.asarray(n, dtype=np.float64)
    lengths = norm3(n)
    if np.any(lengths == 0):
        return None
    # stored float32 unit vectors are already within tolerance; keep them bit-exact
    if np.any(np.abs(lengths - 1.0) > UNIT_TOL):
        n = unit(n)
    return n


def read_ply(path) -> RawGeometry:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    try:
        ply = PlyData.read(str(path))
        vert = ply["vertex"].data
    except Exception as exc:
        raise ParseError(f"{path}: {exc}") from exc
    names = vert.dtype.names
    if not all(k in names for k in ("x", "y", "z")):
        raise ParseError(f"{path}: vertex element lacks x/y/z")
    pts = np.stack([vert[k].astype(np.float64) for k in ("x", "y", "z")], axis=1)
    normals = None
    if all(k in names for k in ("nx", "ny", "nz")):
        normals = _clean_normals(np.stack([vert[k].astype(np.float64) for k in ("nx", "ny", "nz")], axis=1))
    labels = vert["label"].astype(np.int64) if "label" in names else None
    faces = None
    if "face" in ply and ply["face"].count > 0:
        fdata = ply["face"].data
        key = "vertex_indices" if "vertex_indices" in fdata.dtype.names else "vertex_index"
        faces = _triangulate([np.asarray(f, dtype=np.int64) for f in fdata[key]])
    return RawGeometry(pts, normals, faces, labels)


def write_ply(path, points, normals=None, faces=None, labels=None) -> None:
    points = np.asarray(points)
    props = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if normals is not None:
        props += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if labels is not None:
        props.append(("label", "<i4"))
    vert = np.empty(len(points), dtype=props)
    for i, k in enumerate("xyz"):
        vert[k] = points[:, i]
    if normals is not None:
        for i, k in enumerate(("nx", "ny", "nz")):
            vert[k] = np.asarray(normals)[:, i]
    if labels is not None:
        vert["label"] = labels
    elements = [PlyElement.describe(vert, "vertex")]
    if faces is not None:
        fc = np.empty(len(faces), dtype=[("vertex_indices", "i4", (3,))])
        fc["vertex_indices"] = np.asarray(faces, dtype=np.int32)
        elements.append(PlyElement.describe(fc, "face", len_types={"vertex_indices": "u1"}))
    PlyData(elements, text=False, byte_order="<").write(str(path))


def _triangulate(polys) -> np.ndarray:
    tris = []
    for poly in polys:
        if len(poly) < 3:
            raise ParseError("face with fewer than 3 vertices")
        for k in range(1, len(poly) - 1):
            tris.append((poly[0], poly[k], poly[k + 1]))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def read_obj(path) -> RawGeometry:
    """Read ``v``, ``vn`` and ``f`` records; other records are ignored."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    verts, vns, polys, poly_vn = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "vn":
                    vns.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    vi, ni = [], []
                    for tok in parts[1:]:
                        fields = tok.split("/")
                        vi.append(int(fields[0]))
                        ni.append(int(fields[2]) if len(fields) > 2 and fields[2] else 0)
                    polys.append(vi)
                    poly_vn.append(ni)
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if not verts:
        raise ParseError(f"{path}: no vertices")
    pts = np.asarray(verts, dtype=np.float64)
    nv = len(pts)

    def fix(i, n):
        return i - 1 if i > 0 else n + i

    faces = None
    normals = None
    if polys:
        faces = _triangulate([[fix(i, nv) for i in p] for p in polys])
    if vns:
        vn = np.asarray(vns, dtype=np.float64)
        if any(any(poly) for poly in poly_vn):
            normals = np.zeros_like(pts)
            for vi, ni in zip(polys, poly_vn):
                for a, b in zip(vi, ni):
                    if b:
                        normals[fix(a, nv)] = vn[fix(b, len(vn))]
        elif len(vn) == nv:
            normals = vn
        normals = _clean_normals(normals) if normals is not None else None
    return RawGeometry(pts, normals, faces, None)


def write_obj(path, points, normals=None, faces=None) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(points, dtype=np.float64)]
    if normals is not None:
        lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(normals, dtype=np.float64)]
    if faces is not None:
        if normals is not None:
            lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in np.asarray(faces) + 1]
        else:
            lines += [f"f {a} {b} {c}" for a, b, c in np.asarray(faces) + 1]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_geometry(path) -> RawGeometry:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix == ".obj":
        return read_obj(path)
    raise ParseError(f"unsupported geometry format: {path.suffix}")
