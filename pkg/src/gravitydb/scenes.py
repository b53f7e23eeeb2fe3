"""Synthetic grasp scenes and on-disk scene directories.

A synthetic scene wraps five finger-pad patches and a palm patch around a
primitive object. The pads lie on the analytic surface (plus a tiny standoff)
at known contact sites; that configuration is the ground truth. The returned
hand is the ground truth pushed into the object (``penetration``) or lifted
off it (``gap``) along the surface normals.

Scene directory layout::

    scene.json          optional manifest (units, file roles, mask provenance)
    hand.ply            hand points (+ normals, labels, optional faces)
    object.ply|.obj     object mesh, or an oriented point cloud
    object_points.ply   optional oriented samples carrying the attractors
    gt_hand.ply         optional ground-truth hand
    prior.ply           optional reference template (defaults to the hand)
    mask.json           optional contact mask (or hand_mask.csv + object_mask.csv)
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bridge import TemplatePrior
from .contact import ContactMask, load_external_mask, nearest_point_mask, write_mask
from .errors import CountMismatch, InvalidDims, MissingFile, MissingNormals, SchemaError, ValidationError
from .geometry import OrientedPointCloud, SurfaceModel, unit, vertex_normals
from .meshio import read_geometry, write_ply

log = logging.getLogger(__name__)

KINDS = ("sphere", "box", "cylinder")
DEFECTS = ("penetration", "gap", "none")
UNITS = {"m": 1.0, "cm": 1e-2, "mm": 1e-3}
DEFAULT_DIMS = {"sphere": (0.04,), "box": (0.06, 0.05, 0.1), "cylinder": (0.03, 0.12)}
MIN_OBJECT_POINTS = 100
PAD_RADIUS = 0.007
PALM_RADIUS = 0.025
PALM_OFFSET = 0.02
STANDOFF = 1e-5
MASK_INSET = 0.0015
MANIFEST_KEYS = {
    "name", "units", "seed", "hand", "object", "object_points", "gt_hand", "prior",
    "mask", "mask_provenance", "meta",
}


@dataclass
class Scene:
    hand: OrientedPointCloud
    object: SurfaceModel
    mask: ContactMask
    prior: TemplatePrior
    gt_hand: OrientedPointCloud | None = None
    hand_faces: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.hand)
        if len(self.prior.reference) != n:
            raise CountMismatch(f"prior has {len(self.prior.reference)} points for a {n}-point hand")
        if self.gt_hand is not None and len(self.gt_hand) != n:
            raise CountMismatch(f"gt_hand has {len(self.gt_hand)} points for a {n}-point hand")
        self.mask.check_against(self.hand, self.object)


# ---------------------------------------------------------- primitive shapes


def _dims(kind: str, dims) -> tuple:
    if kind not in KINDS:
        raise InvalidDims(f"unknown object kind {kind!r}; expected one of {KINDS}")
    dims = DEFAULT_DIMS[kind] if dims is None else tuple(float(d) for d in np.atleast_1d(dims))
    need = len(DEFAULT_DIMS[kind])
    if len(dims) != need or not all(d > 0 and math.isfinite(d) for d in dims):
        raise InvalidDims(f"{kind} needs {need} positive dimension(s), got {dims}")
    return dims


def icosphere(subdivisions: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere by repeated edge-midpoint subdivision."""
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts), np.array(faces, dtype=np.int64)


def box_mesh(size) -> tuple[np.ndarray, np.ndarray]:
    h = np.asarray(size, dtype=np.float64) / 2
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    faces = np.array([
        (0, 1, 3), (0, 3, 2),  # -x
        (4, 6, 7), (4, 7, 5),  # +x
        (0, 4, 5), (0, 5, 1),  # -y
        (2, 3, 7), (2, 7, 6),  # +y
        (0, 2, 6), (0, 6, 4),  # -z
        (1, 5, 7), (1, 7, 3),  # +z
    ], dtype=np.int64)
    return corners * h, faces


def cylinder_mesh(radius: float, height: float, segments: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Closed cylinder along z, centred at the origin.

    The side is split into rings and the caps into concentric bands so every
    triangle is roughly as tall as it is wide; long slivers would make
    nearest-triangle queries scan most of the mesh.
    """
    arc = 2 * np.pi * radius / segments
    n_z = max(1, int(math.ceil(height / arc)))
    n_r = max(1, int(math.ceil(radius / arc)))
    th = 2 * np.pi * np.arange(segments) / segments
    circle = np.stack([np.cos(th), np.sin(th)], axis=1)
    i = np.arange(segments)
    j = (i + 1) % segments

    verts, faces = [], []

    def ring(rad, z):
        verts.append(np.column_stack([rad * circle, np.full(segments, z)]))
        return sum(len(v) for v in verts) - segments

    def band(a, b, flip):
        # quads between two rings starting at vertex offsets a and b
        t1 = np.stack([a + i, a + j, b + j], 1)
        t2 = np.stack([a + i, b + j, b + i], 1)
        tris = np.concatenate([t1, t2])
        faces.append(tris[:, ::-1] if flip else tris)

    zs = np.linspace(-height / 2, height / 2, n_z + 1)
    side = [ring(radius, z) for z in zs]
    for a, b in zip(side, side[1:]):
        band(a, b, False)
    for z, outer, top in ((-height / 2, side[0], False), (height / 2, side[-1], True)):
        prev = outer
        for k in range(n_r - 1, 0, -1):
            cur = ring(radius * k / n_r, z)
            band(prev, cur, not top)
            prev = cur
        verts.append(np.array([[0.0, 0.0, z]]))
        c = sum(len(v) for v in verts) - 1
        fan = np.stack([np.full(segments, c), prev + i, prev + j], 1)
        faces.append(fan if top else fan[:, ::-1])
    return np.concatenate(verts), np.concatenate(faces).astype(np.int64)


def _sample_surface(kind: str, dims: tuple, n: int, rng: np.random.Generator):
    """Uniform samples on the analytic surface with outward normals."""
    if kind == "sphere":
        u = unit(rng.standard_normal((n, 3)))
        return dims[0] * u, u
    if kind == "box":
        size = np.asarray(dims)
        h = size / 2
        areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]])
        face = rng.choice(6, size=n, p=np.repeat(areas, 2) / (2 * areas.sum()))
        axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
        pts = (rng.random((n, 3)) * 2 - 1) * h
        rows = np.arange(n)
        pts[rows, axis] = sign * h[axis]
        nrm = np.zeros((n, 3))
        nrm[rows, axis] = sign
        return pts, nrm
    r, height = dims
    side, cap = 2 * np.pi * r * height, np.pi * r * r
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    th = rng.random(n) * 2 * np.pi
    rho = np.where(part == 0, r, r * np.sqrt(rng.random(n)))
    z = np.where(part == 0, (rng.random(n) - 0.5) * height, np.where(part == 1, -height / 2, height / 2))
    pts = np.stack([rho * np.cos(th), rho * np.sin(th), z], axis=1)
    nrm = np.zeros((n, 3))
    nrm[part == 0] = np.stack([np.cos(th), np.sin(th), np.zeros(n)], axis=1)[part == 0]
    nrm[part == 1, 2] = -1.0
    nrm[part == 2, 2] = 1.0
    return pts, nrm


def _quantize(a: np.ndarray) -> np.ndarray:
    # stored geometry is float32; quantizing here makes generate -> save -> load exact
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def make_primitive_object(kind: str, dims=None, point_count: int = 8192, seed: int = 0) -> SurfaceModel:
    """Watertight primitive mesh (centred at the origin) with uniform oriented samples.

    ``dims``: sphere ``(radius,)``, box ``(sx, sy, sz)`` full extents,
    cylinder ``(radius, height)`` with its axis along z.
    """
    dims = _dims(kind, dims)
    if int(point_count) != point_count or point_count < MIN_OBJECT_POINTS:
        raise InvalidDims(f"point_count must be an integer >= {MIN_OBJECT_POINTS}")
    if kind == "sphere":
        verts, faces = icosphere(4)
        verts = verts * dims[0]
    elif kind == "box":
        verts, faces = box_mesh(dims)
    else:
        verts, faces = cylinder_mesh(*dims)
    pts, nrm = _sample_surface(kind, dims, int(point_count), np.random.default_rng(seed))
    cloud = OrientedPointCloud(_quantize(pts), _quantize(nrm))
    return SurfaceModel(cloud=cloud, vertices=_quantize(verts), faces=faces)


# ---------------------------------------------------------------- grasps


def _frame(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    t1 = unit(np.cross(n, a))
    return t1, np.cross(n, t1)


def contact_sites(kind: str, dims) -> tuple[np.ndarray, np.ndarray]:
    """Five contact sites (thumb first) with outward normals."""
    dims = _dims(kind, dims)
    if kind == "sphere":
        r = dims[0]
        dirs = [(math.pi, 0.0)] + [(0.0, e) for e in (0.6, 0.2, -0.2, -0.6)]
        n = np.array([[math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)] for a, e in dirs])
        return r * n, n
    if kind == "box":
        hx = dims[0] / 2
        zs = np.array([0.03, 0.01, -0.01, -0.03]) * min(1.0, dims[2] / 0.1)
        c = np.array([[-hx, 0.0, 0.0]] + [[hx, 0.0, z] for z in zs])
        n = np.array([[-1.0, 0, 0]] + [[1.0, 0, 0]] * 4)
        return c, n
    r, h = dims
    zs = np.array([0.03, 0.01, -0.01, -0.03]) * min(1.0, h / 0.12)
    c = np.array([[-r, 0.0, 0.0]] + [[r, 0.0, z] for z in zs])
    n = np.array([[-1.0, 0, 0]] + [[1.0, 0, 0]] * 4)
    return c, n


def _project(kind: str, dims, center, normal, offsets) -> tuple[np.ndarray, np.ndarray]:
    """Map tangent-plane offsets around a site onto the analytic surface."""
    t1, t2 = _frame(normal)
    if kind == "sphere":
        r = dims[0]
        rho = np.linalg.norm(offsets, axis=1)
        ang = rho / r
        d = offsets[:, :1] * t1 + offsets[:, 1:] * t2
        dirn = unit(d)
        n = np.cos(ang)[:, None] * normal + np.sin(ang)[:, None] * dirn
        n = unit(n)
        return r * n, n
    if kind == "box":
        p = center + offsets[:, :1] * t1 + offsets[:, 1:] * t2
        return p, np.broadcast_to(normal, p.shape).copy()
    # cylinder side: arc length along the circumference, straight along z
    r = dims[0]
    th0 = math.atan2(center[1], center[0])
    ez = np.array([0.0, 0.0, 1.0])
    a = offsets @ np.array([t1 @ np.cross(ez, normal), t2 @ np.cross(ez, normal)])
    b = offsets @ np.array([t1 @ ez, t2 @ ez])
    th = th0 + a / r
    n = np.stack([np.cos(th), np.sin(th), np.zeros_like(th)], axis=1)
    p = np.column_stack([r * n[:, :2], center[2] + b])
    return p, n


def _disk(n: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    rho = radius * np.sqrt(rng.random(n))
    th = rng.random(n) * 2 * np.pi
    return np.stack([rho * np.cos(th), rho * np.sin(th)], axis=1)


def _analytic_nearest(kind: str, dims, x: np.ndarray) -> np.ndarray:
    """Closest point on the analytic surface for points outside it."""
    if kind == "sphere":
        return dims[0] * unit(x)
    if kind == "box":
        h = np.asarray(dims) / 2
        return np.clip(x, -h, h)
    r, height = dims
    rad = np.linalg.norm(x[:, :2], axis=1)
    scale = np.minimum(rad, r) / np.where(rad > 0, rad, 1.0)
    return np.column_stack([x[:, :2] * scale[:, None], np.clip(x[:, 2], -height / 2, height / 2)])


def make_grasp_scene(
    kind: str = "sphere",
    defect: str = "none",
    magnitude: float = 0.005,
    seed: int = 0,
    point_count: int = 8192,
    object_points: int = 8192,
    dims=None,
) -> Scene:
    """Five finger pads plus a palm around a primitive, with a known defect.

    Pads carry labels 1..5 (thumb is 1) and mask weight 1; the palm has label
    0 and weight 0. Object attractors are the samples within
    ``PAD_RADIUS - MASK_INSET`` of a site centre.
    """
    if defect not in DEFECTS:
        raise ValidationError(f"unknown defect {defect!r}; expected one of {DEFECTS}")
    if not (magnitude >= 0 and math.isfinite(magnitude)):
        raise ValidationError("defect magnitude must be finite and >= 0")
    dims = _dims(kind, dims)
    if int(point_count) != point_count or point_count < 50:
        raise InvalidDims("hand point_count must be an integer >= 50")
    obj = make_primitive_object(kind, dims, object_points, seed)
    rng = np.random.default_rng([int(seed), 1])
    centers, normals = contact_sites(kind, dims)

    n_palm = point_count // 4
    n_pads = point_count - n_palm
    per_pad = [n_pads // 5 + (1 if i < n_pads % 5 else 0) for i in range(5)]
    pts, nrm, lab, disp = [], [], [], []
    for i, (c, n) in enumerate(zip(centers, normals)):
        p, pn = _project(kind, dims, c, n, _disk(per_pad[i], PAD_RADIUS, rng))
        pts.append(p + STANDOFF * pn)
        nrm.append(pn)
        disp.append(pn)
        lab.append(np.full(per_pad[i], i + 1))
    # palm: a flat disk beside the object facing away from it
    lo, hi = obj.bounds
    palm_c = np.array([0.5 * (lo[0] + hi[0]), hi[1] + PALM_OFFSET, 0.5 * (lo[2] + hi[2])])
    off = _disk(n_palm, PALM_RADIUS, rng)
    palm = palm_c + np.column_stack([off[:, 0], np.zeros(n_palm), off[:, 1]])
    pts.append(palm)
    nrm.append(np.tile([0.0, 1.0, 0.0], (n_palm, 1)))
    disp.append(unit(palm - _analytic_nearest(kind, dims, palm)))
    lab.append(np.zeros(n_palm, dtype=np.int64))

    gt_pts = np.concatenate(pts)
    normals_all = _quantize(np.concatenate(nrm))
    labels = np.concatenate(lab)
    shift = {"penetration": -magnitude, "gap": magnitude, "none": 0.0}[defect]
    hand_pts = gt_pts + shift * np.concatenate(disp)
    gt = OrientedPointCloud(_quantize(gt_pts), normals_all, labels)
    hand = OrientedPointCloud(_quantize(hand_pts), normals_all, labels)

    hand_w = (labels > 0).astype(np.float64)
    samples = obj.cloud.points
    near = np.min(np.linalg.norm(samples[:, None, :] - centers[None, :, :], axis=2), axis=1)
    obj_w = (near <= PAD_RADIUS - MASK_INSET).astype(np.float64)
    mask = ContactMask(hand_w, obj_w, "ground_truth")
    meta = {
        "name": f"{kind}-{defect}-{seed}",
        "kind": kind,
        "dims": list(dims),
        "defect": defect,
        "magnitude": float(magnitude),
        "seed": int(seed),
        "units": "m",
    }
    return Scene(hand, obj, mask, TemplatePrior(gt), gt, None, meta)


# --------------------------------------------------------------- save/load


def _write_cloud(path: Path, cloud: OrientedPointCloud, faces=None):
    write_ply(path, cloud.points, cloud.normals, faces, cloud.labels)


def save_scene(scene: Scene, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_cloud(out / "hand.ply", scene.hand, scene.hand_faces)
    obj = scene.object
    if obj.is_mesh:
        write_ply(out / "object.ply", obj.vertices, None, obj.faces)
        _write_cloud(out / "object_points.ply", obj.cloud)
    else:
        _write_cloud(out / "object.ply", obj.cloud)
    manifest = {
        "name": scene.meta.get("name", out.name),
        "units": "m",
        "seed": scene.meta.get("seed"),
        "hand": "hand.ply",
        "object": "object.ply",
        "mask": "mask.json",
        "mask_provenance": scene.mask.provenance,
        "meta": {k: v for k, v in scene.meta.items() if k not in ("name", "seed", "units")},
    }
    if obj.is_mesh:
        manifest["object_points"] = "object_points.ply"
    if scene.gt_hand is not None:
        _write_cloud(out / "gt_hand.ply", scene.gt_hand)
        manifest["gt_hand"] = "gt_hand.ply"
    _write_cloud(out / "prior.ply", scene.prior.reference)
    manifest["prior"] = "prior.ply"
    write_mask(scene.mask, out / "mask.json")
    (out / "scene.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def _read_manifest(root: Path) -> dict:
    path = root / "scene.json"
    if not path.exists():
        return {}
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: manifest must be a JSON object")
    unknown = set(data) - MANIFEST_KEYS
    if unknown:
        raise SchemaError(f"{path}: unknown manifest keys {sorted(unknown)}")
    if data.get("units", "m") not in UNITS:
        raise SchemaError(f"{path}: units must be one of {sorted(UNITS)}")
    for key in ("hand", "object", "object_points", "gt_hand", "prior", "mask"):
        if key in data and not isinstance(data[key], str):
            raise SchemaError(f"{path}: '{key}' must be a file name")
    return data


def _cloud(raw, scale: float) -> OrientedPointCloud:
    return OrientedPointCloud(raw.points * scale, raw.normals, raw.labels)


def load_scene(path, tau: float = 0.01, softness: float | None = None) -> Scene:
    """Load and validate a scene directory; missing masks fall back to ``nearest_point_mask``."""
    root = Path(path)
    if not root.is_dir():
        raise MissingFile(f"scene directory not found: {root}")
    man = _read_manifest(root)
    scale = UNITS[man.get("units", "m")]

    hand_raw = read_geometry(root / man.get("hand", "hand.ply"))
    hand = _cloud(hand_raw, scale)
    if "object" in man:
        obj_path = root / man["object"]
    else:
        obj_path = next((root / f for f in ("object.ply", "object.obj") if (root / f).exists()), root / "object.ply")
    obj_raw = read_geometry(obj_path)
    samples_name = man.get("object_points", "object_points.ply")
    samples = None
    if (root / samples_name).exists():
        samples = _cloud(read_geometry(root / samples_name), scale)
    elif "object_points" in man:
        raise MissingFile(str(root / samples_name))
    if obj_raw.faces is not None:
        obj = SurfaceModel(cloud=samples, vertices=obj_raw.points * scale, faces=obj_raw.faces)
    else:
        if obj_raw.normals is None:
            raise MissingNormals(f"{obj_path}: point-cloud object needs normals")
        obj = SurfaceModel(cloud=samples if samples is not None else _cloud(obj_raw, scale))

    def optional(key, default):
        name = man.get(key, default)
        if (root / name).exists():
            return _cloud(read_geometry(root / name), scale)
        if key in man:
            raise MissingFile(str(root / name))
        return None

    gt = optional("gt_hand", "gt_hand.ply")
    prior_cloud = optional("prior", "prior.ply")
    if prior_cloud is None:
        prior_cloud = hand

    mask_name = man.get("mask", "mask.json")
    meta = {"name": man.get("name", root.name), "seed": man.get("seed"), "units": "m"}
    meta.update(man.get("meta", {}))
    if (root / mask_name).exists():
        mask = load_external_mask(root / mask_name, hand, obj)
        mask.provenance = man.get("mask_provenance", "external")
    elif (root / "hand_mask.csv").exists():
        mask = load_external_mask(root, hand, obj)
        mask.provenance = man.get("mask_provenance", "external")
    elif "mask" in man:
        raise MissingFile(str(root / mask_name))
    else:
        mask = nearest_point_mask(hand, obj, tau, softness)
        log.info("no mask in %s; using nearest-point mask (tau=%g)", root, tau)
    meta["mask_provenance"] = mask.provenance
    hand_faces = hand_raw.faces
    if hand_faces is not None and hand.normals is None:
        hand = OrientedPointCloud(hand.points, vertex_normals(hand.points, hand_faces), hand.labels)
    return Scene(hand, obj, mask, TemplatePrior(prior_cloud), gt, hand_faces, meta)
