"""Interaction-quality metrics: IV, PD, PE, MPVPE and MPJPE.

Lengths are reported in millimetres and volumes in cubic centimetres; all
inputs are in metres.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CountMismatch, NoJointLabels, ValidationError
from .geometry import OrientedPointCloud, SurfaceModel, norm3, procrustes_align

MM = 1000.0
CM3 = 1e6
DEFAULT_IV_RESOLUTION = 128
REPORT_COLUMNS = ("mpjpe_mm", "mpvpe_mm", "iv_cm3", "pd_mm", "pe_mm")


def _pts(x) -> np.ndarray:
    return x.points if isinstance(x, OrientedPointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)


def _same_count(a, b):
    if len(a) != len(b):
        raise CountMismatch(f"{len(a)} predicted points vs {len(b)} ground-truth points")


def mpvpe(pred, gt, align: bool = False) -> float:
    """Mean per-point distance in mm, optionally after similarity Procrustes."""
    p, g = _pts(pred), _pts(gt)
    _same_count(p, g)
    if align:
        p = procrustes_align(p, g).apply(p)
    return float(norm3(p - g).mean() * MM)


def joint_centroids(points: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Group ids (labels >= 0, ascending) and their centroids."""
    labels = np.asarray(labels).reshape(-1)
    keep = labels >= 0
    if not np.any(keep):
        raise NoJointLabels("no point carries a joint label >= 0")
    ids, inv = np.unique(labels[keep], return_inverse=True)
    sums = np.zeros((len(ids), 3))
    np.add.at(sums, inv, points[keep])
    counts = np.bincount(inv, minlength=len(ids))
    return ids, sums / counts[:, None]


def mpjpe(pred, gt, joint_labels=None, align: bool = False) -> float:
    """Mean distance between per-group centroids (joints) in mm.

    ``joint_labels`` defaults to the labels of ``gt``; negative labels are
    ignored. With ``align`` the joints are Procrustes-aligned first.
    """
    p, g = _pts(pred), _pts(gt)
    _same_count(p, g)
    if joint_labels is None:
        joint_labels = getattr(gt, "labels", None)
    if joint_labels is None:
        raise NoJointLabels("joint labels are required")
    joint_labels = np.asarray(joint_labels).reshape(-1)
    if len(joint_labels) != len(g):
        raise CountMismatch(f"{len(joint_labels)} labels for {len(g)} points")
    _, jp = joint_centroids(p, joint_labels)
    _, jg = joint_centroids(g, joint_labels)
    if align:
        jp = procrustes_align(jp, jg).apply(jp)
    return float(norm3(jp - jg).mean() * MM)


def intersection_volume(hand: SurfaceModel, obj: SurfaceModel, resolution: int = DEFAULT_IV_RESOLUTION) -> float:
    """Volume inside both meshes in cm^3, by voxel-centre inside tests.

    The grid spans the intersection of the two bounding boxes with
    ``resolution`` cells per axis.
    """
    if int(resolution) != resolution or resolution < 16:
        raise ValidationError("IV resolution must be an integer >= 16")
    hand._require_watertight()
    obj._require_watertight()
    lo = np.maximum(hand.bounds[0], obj.bounds[0])
    hi = np.minimum(hand.bounds[1], obj.bounds[1])
    if np.any(hi <= lo):
        return 0.0
    step = (hi - lo) / resolution
    axes = [lo[i] + (np.arange(resolution) + 0.5) * step[i] for i in range(3)]
    inside = hand.winding_number_grid(*axes) > 0.5
    if not np.any(inside):
        return 0.0
    inside &= obj.winding_number_grid(*axes) > 0.5
    return float(inside.sum() * np.prod(step) * CM3)


def penetration_profile(hand, obj: SurfaceModel) -> np.ndarray:
    """Per-point penetration depth in metres (0 outside)."""
    return np.maximum(0.0, -obj.signed_distance(_pts(hand)))


def penetration_depth(hand, obj: SurfaceModel) -> float:
    """Deepest incursion of any hand point into the object, in mm."""
    return float(penetration_profile(hand, obj).max() * MM)


def mean_penetration(hand, obj: SurfaceModel) -> float:
    """Mean depth over penetrating points in mm (0 when none penetrate)."""
    depth = penetration_profile(hand, obj)
    inside = depth > 0
    return float(depth[inside].mean() * MM) if np.any(inside) else 0.0


def proximity_error(pred, gt, obj: SurfaceModel) -> float:
    """Mean |d(pred_i) - d(gt_i)| of unsigned surface distances, in mm."""
    p, g = _pts(pred), _pts(gt)
    _same_count(p, g)
    return float(np.abs(obj.unsigned_distance(p) - obj.unsigned_distance(g)).mean() * MM)


@dataclass
class InteractionReport:
    """Metric bundle; fields that cannot be computed are ``None``."""

    mpjpe_mm: float | None = None
    mpvpe_mm: float | None = None
    pa_mpjpe_mm: float | None = None
    pa_mpvpe_mm: float | None = None
    iv_cm3: float | None = None
    pd_mm: float | None = None
    pd_mean_mm: float | None = None
    pe_mm: float | None = None
    per_point_signed_distances: list = field(default_factory=list)

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k == "per_point_signed_distances" or v is None:
                continue
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"{k} must be finite and >= 0, got {v}")

    def to_json(self, diagnostics: bool = True) -> dict:
        out = asdict(self)
        if not diagnostics:
            out.pop("per_point_signed_distances")
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(REPORT_COLUMNS)
        wr.writerow(["" if getattr(self, c) is None else repr(getattr(self, c)) for c in REPORT_COLUMNS])
        return buf.getvalue()


def evaluate(
    hand: OrientedPointCloud,
    obj: SurfaceModel,
    gt: OrientedPointCloud | None = None,
    hand_faces: np.ndarray | None = None,
    iv_resolution: int = DEFAULT_IV_RESOLUTION,
) -> InteractionReport:
    """Full report; error metrics need ``gt`` and IV needs hand connectivity."""
    sd = obj.signed_distance(hand.points)
    depth = np.maximum(0.0, -sd)
    rep = dict(
        pd_mm=float(depth.max() * MM),
        pd_mean_mm=float(depth[depth > 0].mean() * MM) if np.any(depth > 0) else 0.0,
        per_point_signed_distances=sd.tolist(),
    )
    if hand_faces is not None:
        hand_mesh = SurfaceModel(vertices=hand.points, faces=hand_faces)
        if hand_mesh.is_watertight:
            rep["iv_cm3"] = intersection_volume(hand_mesh, obj, iv_resolution)
    if gt is not None:
        rep["mpvpe_mm"] = mpvpe(hand, gt)
        rep["pe_mm"] = proximity_error(hand, gt, obj)
        if len(hand) >= 3:
            rep["pa_mpvpe_mm"] = mpvpe(hand, gt, align=True)
        if gt.labels is not None and np.any(gt.labels >= 0):
            rep["mpjpe_mm"] = mpjpe(hand, gt)
            if len(np.unique(gt.labels[gt.labels >= 0])) >= 3:
                rep["pa_mpjpe_mm"] = mpjpe(hand, gt, align=True)
    return InteractionReport(**rep)
