"""Point-cloud and triangle-surface primitives.

All coordinates are meters. Nearest-primitive queries are exact: candidate
sets come from a k-d tree with conservative bounds, and the final choice is
made with the same elementwise arithmetic a brute-force scan would use, with
ties going to the lowest primitive index.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    CountMismatch,
    DegenerateConfiguration,
    EmptyGeometry,
    InvalidFaceIndex,
    InvalidNormals,
    MissingNormals,
    NonFiniteCoordinate,
    NotWatertight,
)

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6
_DEGENERATE_AREA = 1e-20


def dot3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit sum keeps results independent of array shape (no pairwise/SIMD reductions)
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def norm3(a: np.ndarray) -> np.ndarray:
    return np.sqrt(dot3(a, a))


def _as_points(x, name: str = "points") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    return arr


def worker_count() -> int:
    """Thread count for k-d tree queries, from ``GRAVITYDB_THREADS``."""
    import os

    try:
        return max(1, int(os.environ.get("GRAVITYDB_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class OrientedPointCloud:
    """Positions with optional unit normals and integer labels."""

    points: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 3:
            pts = pts.reshape(1, 3)
        if pts.size == 0:
            raise EmptyGeometry("point cloud is empty")
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise NonFiniteCoordinate("point cloud has non-finite coordinates")
        self.points = pts
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape != pts.shape:
                raise CountMismatch(f"{len(nrm)} normals for {len(pts)} points")
            if not np.all(np.isfinite(nrm)) or np.any(np.abs(norm3(nrm) - 1.0) > UNIT_TOL):
                raise InvalidNormals("normals must be finite unit vectors")
            self.normals = nrm
        if self.labels is not None:
            lab = np.asarray(self.labels).astype(np.int64).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise CountMismatch(f"{len(lab)} labels for {len(pts)} points")
            self.labels = lab

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "OrientedPointCloud":
        return OrientedPointCloud(points, self.normals, self.labels)

    def transformed(self, tf: "RigidTransform") -> "OrientedPointCloud":
        normals = None if self.normals is None else unit(self.normals @ tf.rotation.T)
        return OrientedPointCloud(tf.apply(self.points), normals, self.labels)


def unit(v: np.ndarray) -> np.ndarray:
    n = norm3(v)
    return v / np.where(n > 0, n, 1.0)[..., None]


@dataclass
class RigidTransform:
    """x -> scale * R @ x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if (
            np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-8
            or np.linalg.det(self.rotation) < 0
        ):
            raise ValueError("rotation must be orthonormal with determinant +1")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=np.float64) @ self.rotation.T) + self.translation


# ---------------------------------------------------------------- triangles


def closest_point_on_triangles(p, a, b, c) -> np.ndarray:
    """Closest point on triangle (a, b, c) to p, rowwise (Ericson's region test)."""
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = dot3(ab, ap), dot3(ac, ap)
    d3, d4 = dot3(ab, bp), dot3(ac, bp)
    d5, d6 = dot3(ab, cp), dot3(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(p.shape[0], dtype=bool)

    def take(mask, value):
        nonlocal done
        m = mask & ~done
        if np.any(m):
            out[m] = value(m)
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), lambda m: a[m])
        take((d3 >= 0) & (d4 <= d3), lambda m: b[m])
        take(
            (vc <= 0) & (d1 >= 0) & (d3 <= 0),
            lambda m: a[m] + (d1[m] / (d1[m] - d3[m]))[:, None] * ab[m],
        )
        take((d6 >= 0) & (d5 <= d6), lambda m: c[m])
        take(
            (vb <= 0) & (d2 >= 0) & (d6 <= 0),
            lambda m: a[m] + (d2[m] / (d2[m] - d6[m]))[:, None] * ac[m],
        )
        take(
            (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
            lambda m: b[m]
            + ((d4[m] - d3[m]) / ((d4[m] - d3[m]) + (d5[m] - d6[m])))[:, None] * (c[m] - b[m]),
        )
        rest = ~done
        if np.any(rest):
            denom = 1.0 / (va[rest] + vb[rest] + vc[rest])
            v = vb[rest] * denom
            w = vc[rest] * denom
            out[rest] = a[rest] + ab[rest] * v[:, None] + ac[rest] * w[:, None]
    return out


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    return unit(np.cross(v1 - v0, v2 - v0))


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals."""
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    fn = np.cross(v1 - v0, v2 - v0)
    acc = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(acc, faces[:, i], fn)
    n = norm3(acc)
    acc[n == 0] = (0.0, 0.0, 1.0)
    return unit(acc)


def solid_angle_winding_number(vertices, faces, xs, chunk: int = 2048) -> np.ndarray:
    """Generalized winding number by summing signed solid angles.

    O(N*F); used as the reference for the ray-crossing path.
    """
    xs = _as_points(xs)
    v = [np.asarray(vertices, dtype=np.float64)[faces[:, i]] for i in range(3)]
    out = np.empty(len(xs))
    for s in range(0, len(xs), chunk):
        x = xs[s : s + chunk, None, :]
        a, b, c = v[0][None] - x, v[1][None] - x, v[2][None] - x
        la, lb, lc = norm3(a), norm3(b), norm3(c)
        det = dot3(a, np.cross(b, c))
        den = la * lb * lc + dot3(a, b) * lc + dot3(b, c) * la + dot3(c, a) * lb
        out[s : s + chunk] = (2.0 * np.arctan2(det, den)).sum(axis=1) / (4.0 * np.pi)
    return out


def _edge_fn(ux, uy, vx, vy, px, py):
    return (vx - ux) * (py - uy) - (vy - uy) * (px - ux)


def _top_left(ux, uy, vx, vy):
    dx, dy = vx - ux, vy - uy
    return (dy < 0) | ((dy == 0) & (dx < 0))


class _RayIndex:
    """Triangles binned by their xy bounding boxes, for +z ray casting."""

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        a, b, c = (vertices[faces[:, i]] for i in range(3))
        orient = _edge_fn(a[:, 0], a[:, 1], b[:, 0], b[:, 1], c[:, 0], c[:, 1])
        keep = orient != 0
        sign = np.sign(orient[keep])
        a, b, c = a[keep], b[keep], c[keep]
        # counter-clockwise in projection; the swap flips the crossing sign accordingly
        flip = sign < 0
        b2 = np.where(flip[:, None], c, b)
        c2 = np.where(flip[:, None], b, c)
        self.a, self.b, self.c, self.sign = a, b2, c2, sign
        self.area2 = np.abs(orient[keep])
        n = len(a)
        tri_min = np.minimum(np.minimum(a, b), c)[:, :2]
        tri_max = np.maximum(np.maximum(a, b), c)[:, :2]
        if n == 0:
            self.lo = np.zeros(2)
            self.cell = np.ones(2)
            self.grid = 1
            self.start = np.zeros(2, dtype=np.int64)
            self.tris = np.zeros(0, dtype=np.int64)
            return
        self.lo = tri_min.min(axis=0)
        hi = tri_max.max(axis=0)
        self.grid = int(np.clip(np.sqrt(n), 1, 256))
        self.cell = np.maximum((hi - self.lo) / self.grid, 1e-300)
        i0 = self._bin(tri_min)
        i1 = self._bin(tri_max)
        nx = i1[:, 0] - i0[:, 0] + 1
        ny = i1[:, 1] - i0[:, 1] + 1
        counts = nx * ny
        tri_id = np.repeat(np.arange(n), counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        cx = i0[tri_id, 0] + offs % nx[tri_id]
        cy = i0[tri_id, 1] + offs // nx[tri_id]
        cell_id = cx * self.grid + cy
        order = np.argsort(cell_id, kind="stable")
        self.tris = tri_id[order]
        self.start = np.searchsorted(cell_id[order], np.arange(self.grid * self.grid + 1))

    def _bin(self, xy: np.ndarray) -> np.ndarray:
        idx = np.floor((xy - self.lo) / self.cell).astype(np.int64)
        return np.clip(idx, 0, self.grid - 1)

    def crossings(self, qxy: np.ndarray):
        """Return (query row, crossing z, sign) for every triangle hit by a +z line."""
        qxy = np.asarray(qxy, dtype=np.float64)
        if len(self.tris) == 0 or len(qxy) == 0:
            e = np.zeros(0)
            return np.zeros(0, dtype=np.int64), e, e
        inside_box = np.all((qxy >= self.lo) & (qxy <= self.lo + self.cell * self.grid), axis=1)
        ij = self._bin(qxy)
        cid = ij[:, 0] * self.grid + ij[:, 1]
        cnt = np.where(inside_box, self.start[cid + 1] - self.start[cid], 0)
        rows = np.repeat(np.arange(len(qxy)), cnt)
        offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        tri = self.tris[self.start[cid[rows]] + offs]
        px, py = qxy[rows, 0], qxy[rows, 1]
        a, b, c = self.a[tri], self.b[tri], self.c[tri]
        e_bc = _edge_fn(b[:, 0], b[:, 1], c[:, 0], c[:, 1], px, py)
        e_ca = _edge_fn(c[:, 0], c[:, 1], a[:, 0], a[:, 1], px, py)
        e_ab = _edge_fn(a[:, 0], a[:, 1], b[:, 0], b[:, 1], px, py)
        tl_bc = _top_left(b[:, 0], b[:, 1], c[:, 0], c[:, 1])
        tl_ca = _top_left(c[:, 0], c[:, 1], a[:, 0], a[:, 1])
        tl_ab = _top_left(a[:, 0], a[:, 1], b[:, 0], b[:, 1])
        hit = (
            ((e_bc > 0) | ((e_bc == 0) & tl_bc))
            & ((e_ca > 0) | ((e_ca == 0) & tl_ca))
            & ((e_ab > 0) | ((e_ab == 0) & tl_ab))
        )
        rows, tri = rows[hit], tri[hit]
        area = self.area2[tri]
        z = (e_bc[hit] * a[hit, 2] + e_ca[hit] * b[hit, 2] + e_ab[hit] * c[hit, 2]) / area
        return rows, z, self.sign[tri]


# ----------------------------------------------------------------- surfaces


class SurfaceModel:
    """Immutable surface: a triangle mesh and/or an oriented point cloud.

    With a mesh, distance queries go to the triangles and ``cloud`` holds the
    oriented sample points used as attractor carriers. Without a mesh the
    cloud itself is the surface.
    """

    def __init__(
        self,
        cloud: OrientedPointCloud | None = None,
        vertices: np.ndarray | None = None,
        faces: np.ndarray | None = None,
    ):
        self.vertices = None
        self.faces = None
        if vertices is not None or faces is not None:
            if vertices is None or faces is None:
                raise ValueError("mesh needs both vertices and faces")
            verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
            fcs = np.asarray(faces)
            if fcs.size == 0:
                raise EmptyGeometry("mesh has no faces")
            fcs = fcs.astype(np.int64).reshape(-1, 3)
            if not np.all(np.isfinite(verts)):
                raise NonFiniteCoordinate("mesh has non-finite vertices")
            if fcs.min() < 0 or fcs.max() >= len(verts):
                raise InvalidFaceIndex(f"face index out of range for {len(verts)} vertices")
            v0, v1, v2 = (verts[fcs[:, i]] for i in range(3))
            area = 0.5 * norm3(np.cross(v1 - v0, v2 - v0))
            good = area > _DEGENERATE_AREA
            if not np.all(good):
                log.warning("dropping %d degenerate faces", int((~good).sum()))
                fcs = fcs[good]
            if len(fcs) == 0:
                raise EmptyGeometry("mesh has no non-degenerate faces")
            self.vertices = verts
            self.faces = fcs
            self.vertices.setflags(write=False)
            self.faces.setflags(write=False)
            self._tri = [verts[fcs[:, i]] for i in range(3)]
            self.face_normals = face_normals(verts, fcs)
            centroids = (self._tri[0] + self._tri[1] + self._tri[2]) / 3.0
            self._centroid_tree = cKDTree(centroids)
            self._rmax = float(max(norm3(t - centroids).max() for t in self._tri))
            self._ray = _RayIndex(verts, fcs)
            self._open_edges = _open_edge_count(fcs)
        if cloud is None:
            if self.vertices is None:
                raise EmptyGeometry("surface needs a mesh or a point cloud")
            cloud = OrientedPointCloud(self.vertices, vertex_normals(self.vertices, self.faces))
        self.cloud = cloud
        self._cloud_tree = cKDTree(cloud.points)
        lo = self.vertices.min(axis=0) if self.is_mesh else cloud.points.min(axis=0)
        hi = self.vertices.max(axis=0) if self.is_mesh else cloud.points.max(axis=0)
        self.bounds = np.stack([lo, hi])

    @property
    def is_mesh(self) -> bool:
        return self.faces is not None

    @property
    def is_watertight(self) -> bool:
        return self.is_mesh and self._open_edges == 0

    @property
    def n_primitives(self) -> int:
        return len(self.faces) if self.is_mesh else len(self.cloud)

    def area(self) -> float:
        a, b, c = self._tri
        return float(0.5 * norm3(np.cross(b - a, c - a)).sum())

    def volume(self) -> float:
        """Enclosed volume by the divergence theorem (meaningful if watertight)."""
        a, b, c = self._tri
        return float(dot3(a, np.cross(b, c)).sum() / 6.0)

    # -- nearest queries

    def nearest(self, xs):
        """Return (points, normals, distances, primitive indices) for each query."""
        xs = _as_points(xs, "queries")
        if self.is_mesh:
            idx, dist, cp = self._nearest_mesh(xs)
            return cp, self.face_normals[idx], dist, idx
        idx, dist = _nearest_cloud(self._cloud_tree, self.cloud.points, xs)
        nrm = None if self.cloud.normals is None else self.cloud.normals[idx]
        return self.cloud.points[idx], nrm, dist, idx

    def _nearest_mesh(self, xs):
        a, b, c = self._tri
        nf = len(self.faces)
        k = min(8, nf)
        _, cand = self._centroid_tree.query(xs, k=k, workers=worker_count())
        cand = cand.reshape(len(xs), k)
        rep = np.repeat(xs, k, axis=0)
        flat = cand.reshape(-1)
        cp = closest_point_on_triangles(rep, a[flat], b[flat], c[flat])
        ub = norm3(rep - cp).reshape(len(xs), k).min(axis=1)
        # any face closer than ub has its centroid within ub + rmax
        radii = ub + self._rmax * (1.0 + 1e-9) + 1e-12
        lists = self._centroid_tree.query_ball_point(
            xs, radii, workers=worker_count(), return_sorted=False
        )
        counts = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(xs))
        tri = np.fromiter(itertools.chain.from_iterable(lists), dtype=np.int64, count=counts.sum())
        rows = np.repeat(np.arange(len(xs)), counts)
        q = xs[rows]
        cp = closest_point_on_triangles(q, a[tri], b[tri], c[tri])
        d = norm3(q - cp)
        pick = _first_per_row(rows, d, tri, len(xs))
        return tri[pick], d[pick], cp[pick]

    def nearest_sample(self, xs):
        """Index and distance of the nearest oriented sample point."""
        return _nearest_cloud(self._cloud_tree, self.cloud.points, _as_points(xs, "queries"))

    def unsigned_distance(self, xs) -> np.ndarray:
        return self.nearest(xs)[2]

    def winding_number(self, xs) -> np.ndarray:
        """Winding number by signed +z ray crossings (integer for closed meshes)."""
        if not self.is_mesh:
            raise ValueError("winding number needs a mesh")
        xs = _as_points(xs, "queries")
        rows, z, s = self._ray.crossings(xs[:, :2])
        above = z > xs[rows, 2]
        return np.bincount(rows[above], weights=s[above], minlength=len(xs))

    def winding_number_grid(self, xs, ys, zs) -> np.ndarray:
        """Winding numbers at all grid nodes (xs x ys x zs), one ray per column."""
        if not self.is_mesh:
            raise ValueError("winding number needs a mesh")
        xs, ys, zs = (np.asarray(v, dtype=np.float64) for v in (xs, ys, zs))
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        cols = np.stack([gx.ravel(), gy.ravel()], axis=1)
        rows, z, s = self._ray.crossings(cols)
        # crossing with height z counts for every node strictly below it
        kc = np.searchsorted(zs, z, side="left")
        diff = np.zeros((len(cols), len(zs) + 1))
        np.add.at(diff, (rows, np.zeros_like(rows)), s)
        np.add.at(diff, (rows, kc), -s)
        return np.cumsum(diff, axis=1)[:, :-1].reshape(len(xs), len(ys), len(zs))

    def inside(self, xs) -> np.ndarray:
        """Inside test: winding number for meshes, nearest-normal side for clouds."""
        xs = _as_points(xs, "queries")
        if self.is_mesh:
            self._require_watertight()
            res = np.zeros(len(xs), dtype=bool)
            box = np.all((xs >= self.bounds[0]) & (xs <= self.bounds[1]), axis=1)
            if np.any(box):
                res[box] = self.winding_number(xs[box]) > 0.5
            return res
        p, n, _, _ = self.nearest(xs)
        if n is None:
            raise MissingNormals("signed distance on a point cloud needs normals")
        return dot3(xs - p, n) < 0

    def signed_distance(self, xs) -> np.ndarray:
        """Distance to the surface, negative inside."""
        xs = _as_points(xs, "queries")
        if self.is_mesh:
            self._require_watertight()
            d = self.unsigned_distance(xs)
            return np.where(self.inside(xs), -d, d)
        p, n, d, _ = self.nearest(xs)
        if n is None:
            raise MissingNormals("signed distance on a point cloud needs normals")
        return np.where(dot3(xs - p, n) < 0, -d, d)

    def _require_watertight(self):
        if not self.is_watertight:
            raise NotWatertight(f"mesh has {self._open_edges} open edges")


def _open_edge_count(faces: np.ndarray) -> int:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return int((counts == 1).sum())


def _first_per_row(rows, d, idx, n_rows) -> np.ndarray:
    """Position of the (min distance, min index) entry for each row."""
    order = np.lexsort((idx, d, rows))
    r = rows[order]
    first = np.ones(len(r), dtype=bool)
    first[1:] = r[1:] != r[:-1]
    pick = order[first]
    if len(pick) != n_rows:
        raise RuntimeError("nearest query lost a row")
    return pick


def _nearest_cloud(tree: cKDTree, pts: np.ndarray, xs: np.ndarray):
    n = len(pts)
    k = min(8, n)
    _, ii = tree.query(xs, k=k, workers=worker_count())
    ii = ii.reshape(len(xs), k)
    d = norm3(xs[:, None, :] - pts[ii])
    rows = np.repeat(np.arange(len(xs)), k)
    pick = _first_per_row(rows, d.ravel(), ii.ravel(), len(xs))
    best_i = ii.ravel()[pick]
    best_d = d.ravel()[pick]
    if k < n:
        # a tie may hide beyond the k-th neighbour; rescan those rows by ball query
        amb = np.nonzero(d.max(axis=1) <= best_d * (1 + 1e-12) + 1e-300)[0]
        for r in amb:
            cand = np.asarray(tree.query_ball_point(xs[r], best_d[r] * (1 + 1e-9) + 1e-15))
            dc = norm3(xs[r] - pts[cand])
            j = np.lexsort((cand, dc))[0]
            best_i[r], best_d[r] = cand[j], dc[j]
    return best_i, best_d


def build_surface(geometry, samples: OrientedPointCloud | None = None) -> SurfaceModel:
    """Build a surface from an oriented cloud, a ``(vertices, faces)`` pair, or a point array.

    ``samples`` attaches an oriented cloud to a mesh (e.g. uniform surface
    samples); otherwise mesh vertices with area-weighted normals are used.
    """
    if isinstance(geometry, SurfaceModel):
        return geometry
    if isinstance(geometry, OrientedPointCloud):
        return SurfaceModel(cloud=geometry)
    if isinstance(geometry, tuple) and len(geometry) == 2:
        return SurfaceModel(cloud=samples, vertices=geometry[0], faces=geometry[1])
    return SurfaceModel(cloud=OrientedPointCloud(geometry))


def nearest_surface_point(s: SurfaceModel, x):
    """Closest surface point, its normal and distance for a single 3D point."""
    p, n, d, _ = s.nearest(np.asarray(x, dtype=np.float64).reshape(1, 3))
    return p[0], None if n is None else n[0], float(d[0])


def signed_distance(s: SurfaceModel, x):
    xs = np.asarray(x, dtype=np.float64)
    out = s.signed_distance(xs.reshape(-1, 3))
    return float(out[0]) if xs.ndim == 1 else out


# ----------------------------------------------------------------- alignment


def procrustes_align(source, target, with_scale: bool = True) -> RigidTransform:
    """Least-squares similarity transform taking ``source`` onto ``target`` (Umeyama)."""
    x = source.points if isinstance(source, OrientedPointCloud) else _as_points(source)
    y = target.points if isinstance(target, OrientedPointCloud) else _as_points(target)
    if x.shape != y.shape:
        raise CountMismatch(f"{len(x)} source points vs {len(y)} target points")
    if len(x) < 3:
        raise DegenerateConfiguration("need at least 3 points")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    x0, y0 = x - mx, y - my
    sv = np.linalg.svd(x0, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-12 * sv[0]:
        raise DegenerateConfiguration("source points are collinear or coincident")
    cov = y0.T @ x0 / len(x)
    u, s, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    r = (u * d) @ vt
    scale = float((s * d).sum() / (x0 * x0).sum() * len(x)) if with_scale else 1.0
    t = my - scale * r @ mx
    return RigidTransform(r, t, scale)


# ---------------------------------------------------------------- normals


def estimate_normals(points: np.ndarray, k: int = 16, reference: np.ndarray | None = None) -> np.ndarray:
    """PCA normals from k nearest neighbours.

    Orientation follows ``reference`` normals when given, otherwise points
    away from the cloud centroid.
    """
    pts = _as_points(points)
    k = min(k, len(pts))
    if k < 3:
        raise DegenerateConfiguration("need at least 3 points for normal estimation")
    _, nb = cKDTree(pts).query(pts, k=k, workers=worker_count())
    nbh = pts[nb] - pts[nb].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nbh, nbh)
    _, vecs = np.linalg.eigh(cov)
    n = vecs[:, :, 0]
    ref = reference if reference is not None else pts - pts.mean(axis=0)
    flip = dot3(n, ref) < 0
    n[flip] *= -1
    return unit(n)
