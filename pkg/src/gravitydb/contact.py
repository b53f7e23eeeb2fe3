"""Contact masks: external ingestion plus two geometric baselines.

A mask carries per-point weights in [0, 1] for the hand and for the object's
oriented sample cloud. Externally predicted masks arrive as JSON
(``{"hand": [...], "object": [...]}``) or as a pair of ``index,weight`` CSV
files (``hand_mask.csv`` / ``object_mask.csv``) in one directory.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import CountMismatch, MissingFile, MissingNormals, ParseError, ValidationError
from .geometry import OrientedPointCloud, SurfaceModel, dot3, norm3, worker_count

log = logging.getLogger(__name__)

PROVENANCES = ("external", "nearest_point", "ray_based", "ground_truth")
DEFAULT_TAU = 0.01


@dataclass
class ContactMask:
    hand_weights: np.ndarray
    object_weights: np.ndarray
    provenance: str = "external"
    scale_object_weights: np.ndarray | None = None
    clamped: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.hand_weights = np.asarray(self.hand_weights, dtype=np.float64).reshape(-1)
        self.object_weights = np.asarray(self.object_weights, dtype=np.float64).reshape(-1)
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown mask provenance {self.provenance!r}")
        arrays = [self.hand_weights, self.object_weights]
        if self.scale_object_weights is not None:
            self.scale_object_weights = np.asarray(self.scale_object_weights, dtype=np.float64)
            if self.scale_object_weights.ndim != 2 or self.scale_object_weights.shape[1] != len(
                self.object_weights
            ):
                raise CountMismatch("per-scale object weights must have shape (L, n_object)")
            arrays.append(self.scale_object_weights)
        for w in arrays:
            if np.any(~((w >= 0) & (w <= 1))):
                raise ValidationError("mask weights must lie in [0, 1]")

    def check_against(self, hand: OrientedPointCloud, obj) -> None:
        n_obj = len(_object_cloud(obj))
        if len(self.hand_weights) != len(hand) or len(self.object_weights) != n_obj:
            raise CountMismatch(
                f"mask sizes ({len(self.hand_weights)}, {len(self.object_weights)}) "
                f"do not match clouds ({len(hand)}, {n_obj})"
            )

    def object_weights_per_scale(self, n_scales: int) -> np.ndarray:
        if self.scale_object_weights is not None:
            if len(self.scale_object_weights) != n_scales:
                raise CountMismatch(
                    f"mask has {len(self.scale_object_weights)} scale overrides for {n_scales} scales"
                )
            return self.scale_object_weights
        return np.broadcast_to(self.object_weights, (n_scales, len(self.object_weights)))

    def to_json(self) -> dict:
        out = {
            "provenance": self.provenance,
            "hand": self.hand_weights.tolist(),
            "object": self.object_weights.tolist(),
        }
        if self.scale_object_weights is not None:
            out["object_per_scale"] = self.scale_object_weights.tolist()
        return out


def _object_cloud(obj) -> OrientedPointCloud:
    return obj.cloud if isinstance(obj, SurfaceModel) else obj


def _clamp(values, what: str) -> tuple[np.ndarray, int]:
    w = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ParseError(f"non-finite {what} weight")
    bad = int(((w < 0) | (w > 1)).sum())
    if bad:
        log.warning("clamped %d %s weights into [0, 1]", bad, what)
    return np.clip(w, 0.0, 1.0), bad


def _read_index_weight_csv(path: Path, n: int, what: str) -> np.ndarray:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise MissingFile(str(path)) from exc
    if not rows or [c.strip() for c in rows[0]] != ["index", "weight"]:
        raise ParseError(f"{path}: expected header 'index,weight'")
    try:
        idx = np.array([int(r[0]) for r in rows[1:] if r], dtype=np.int64)
        val = np.array([float(r[1]) for r in rows[1:] if r], dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if len(idx) != n or not np.array_equal(np.sort(idx), np.arange(n)):
        raise CountMismatch(f"{path}: {len(idx)} {what} entries for {n} points")
    out = np.empty(n)
    out[idx] = val
    return out


def load_external_mask(path, hand: OrientedPointCloud, obj) -> ContactMask:
    """Read a predicted mask (JSON file or directory of two CSV files)."""
    path = Path(path)
    n_hand, n_obj = len(hand), len(_object_cloud(obj))
    per_scale = None
    if path.is_dir():
        hw = _read_index_weight_csv(path / "hand_mask.csv", n_hand, "hand")
        ow = _read_index_weight_csv(path / "object_mask.csv", n_obj, "object")
    else:
        if not path.exists():
            raise MissingFile(str(path))
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            hw = np.asarray(data["hand"], dtype=np.float64)
            ow = np.asarray(data["object"], dtype=np.float64)
            if "object_per_scale" in data:
                per_scale = np.asarray(data["object_per_scale"], dtype=np.float64)
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"{path}: {exc}") from exc
        if hw.ndim != 1 or ow.ndim != 1:
            raise ParseError(f"{path}: weights must be flat lists")
        if len(hw) != n_hand or len(ow) != n_obj:
            raise CountMismatch(f"{path}: mask sizes ({len(hw)}, {len(ow)}) vs clouds ({n_hand}, {n_obj})")
    hw, c1 = _clamp(hw, "hand")
    ow, c2 = _clamp(ow, "object")
    c3 = 0
    if per_scale is not None:
        per_scale, c3 = _clamp(per_scale, "per-scale object")
    return ContactMask(hw, ow, "external", per_scale, clamped=c1 + c2 + c3)


def write_mask(mask: ContactMask, path) -> None:
    """Write JSON when ``path`` ends in ``.json``, otherwise two CSV files into a directory."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(mask.to_json()), encoding="utf-8")
        return
    path.mkdir(parents=True, exist_ok=True)
    for name, w in (("hand_mask.csv", mask.hand_weights), ("object_mask.csv", mask.object_weights)):
        with open(path / name, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["index", "weight"])
            wr.writerows((i, repr(float(v))) for i, v in enumerate(w))
    (path / "provenance.txt").write_text(mask.provenance + "\n", encoding="utf-8")


# ------------------------------------------------------------- baselines


def soft_shoulder(d: np.ndarray, tau: float, softness: float) -> np.ndarray:
    """1 inside ``tau``, Gaussian fall-off of width ``softness`` beyond it."""
    d = np.asarray(d, dtype=np.float64)
    if np.isinf(tau):
        return np.ones_like(d)
    with np.errstate(over="ignore"):
        return np.where(d <= tau, 1.0, np.exp(-(((d - tau) / softness) ** 2)))


def nearest_point_mask(
    hand: OrientedPointCloud, obj: SurfaceModel, tau: float = DEFAULT_TAU, softness: float | None = None
) -> ContactMask:
    """Proximity mask: hand weight from distance to the surface, object weight by assignment.

    Each hand point is assigned to its nearest object sample point; an object
    point takes the largest weight among the hand points assigned to it.
    """
    if not tau > 0:
        raise ValidationError("tau must be positive")
    if softness is None:
        softness = tau / 2 if np.isfinite(tau) else 1.0
    if not softness > 0:
        raise ValidationError("softness must be positive")
    d = obj.unsigned_distance(hand.points)
    hw = soft_shoulder(d, tau, softness)
    owner, _ = obj.nearest_sample(hand.points)
    ow = np.zeros(len(obj.cloud))
    np.maximum.at(ow, owner, hw)
    return ContactMask(hw, ow, "nearest_point", meta={"tau": tau, "softness": softness})


def mean_spacing(points: np.ndarray) -> float:
    """Mean distance from each point to its nearest neighbour."""
    if len(points) < 2:
        return 0.0
    _, nb = cKDTree(points).query(points, k=2, workers=worker_count())
    # recompute with elementwise arithmetic so the value is reproducible outside the tree
    d = norm3(points - points[nb[:, 1]])
    return float(d.mean())


def ray_triangle_t(o, d, a, b, c) -> np.ndarray:
    """Ray parameter of the hit with triangle (a, b, c), or inf (Moller-Trumbore, rowwise)."""
    e1, e2 = b - a, c - a
    h = np.cross(d, e2)
    det = dot3(e1, h)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = o - a
        u = dot3(s, h) * inv
        q = np.cross(s, e1)
        v = dot3(d, q) * inv
        t = dot3(e2, q) * inv
        ok = (det != 0) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t >= 0)
    return np.where(ok, t, np.inf)


def cast_rays(obj: SurfaceModel, origins: np.ndarray, dirs: np.ndarray, max_range: float):
    """First hit distance along each ray within ``max_range`` (inf when none)."""
    n = len(origins)
    t_hit = np.full(n, np.inf)
    mid = origins + dirs * (max_range / 2)
    if obj.is_mesh:
        tree = obj._centroid_tree
        radius = max_range / 2 + obj._rmax * (1 + 1e-9) + 1e-12
        a, b, c = obj._tri
    else:
        tree = obj._cloud_tree
        spacing = mean_spacing(obj.cloud.points)
        radius = max_range / 2 + spacing * (1 + 1e-9) + 1e-12
    lists = tree.query_ball_point(mid, radius, workers=worker_count(), return_sorted=False)
    counts = np.fromiter((len(x) for x in lists), dtype=np.int64, count=n)
    cand = np.fromiter(itertools.chain.from_iterable(lists), dtype=np.int64, count=counts.sum())
    rows = np.repeat(np.arange(n), counts)
    if obj.is_mesh:
        t = ray_triangle_t(origins[rows], dirs[rows], a[cand], b[cand], c[cand])
    else:
        # cloud surface: a point within one spacing of the ray counts as a hit at its foot
        rel = obj.cloud.points[cand] - origins[rows]
        t = dot3(rel, dirs[rows])
        perp = norm3(rel - t[:, None] * dirs[rows])
        t = np.where((t >= 0) & (perp <= spacing), t, np.inf)
    t = np.where(t <= max_range, t, np.inf)
    np.minimum.at(t_hit, rows, t)
    return t_hit


def ray_based_mask(hand: OrientedPointCloud, obj: SurfaceModel, max_range: float = 0.05) -> ContactMask:
    """Cast a ray from each hand point along its inward direction (``-normal``).

    Hand points whose ray meets the object within ``max_range`` get weight 1;
    object sample points within one mean sample spacing of any hit point get
    weight 1.
    """
    if hand.normals is None:
        raise MissingNormals("ray-based contact needs hand normals")
    if not max_range > 0:
        raise ValidationError("max_range must be positive")
    dirs = -hand.normals
    t = cast_rays(obj, hand.points, dirs, max_range)
    hit = np.isfinite(t)
    hw = hit.astype(np.float64)
    ow = np.zeros(len(obj.cloud))
    if np.any(hit):
        hits = hand.points[hit] + dirs[hit] * t[hit, None]
        spacing = mean_spacing(obj.cloud.points)
        pts = obj.cloud.points
        near = cKDTree(hits).query_ball_point(pts, spacing * (1 + 1e-9) + 1e-15, workers=worker_count())
        for i, cand in enumerate(near):
            if cand and np.any(norm3(pts[i] - hits[cand]) <= spacing):
                ow[i] = 1.0
    return ContactMask(hw, ow, "ray_based", meta={"max_range": max_range})
