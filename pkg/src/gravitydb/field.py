"""Hierarchical Gaussian attraction field.

The potential is a weighted sum of isotropic Gaussian bumps centred on the
object's contact points, summed over several receptive radii:

    phi(x) = sum_l sum_p w_lp * k_l * exp(-|x - p|^2 / sigma_l^2)

Its gradient points toward the attractors, so the attraction force is
``grad phi`` itself and the energy a hand point descends is ``-phi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .geometry import dot3

DEFAULT_CUTOFF = 6.0
_DENSE_PAIRS = 1 << 22


@dataclass(frozen=True, eq=False)
class GravityFieldSpec:
    """Scales ``(sigma_l, k_l)`` plus attractors with per-scale weights.

    ``weights`` has shape ``(L, M)``; a 1-D array is broadcast to every scale.
    """

    sigmas: np.ndarray
    ks: np.ndarray
    attractors: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        sig = np.atleast_1d(np.asarray(self.sigmas, dtype=np.float64))
        ks = np.atleast_1d(np.asarray(self.ks, dtype=np.float64))
        att = np.asarray(self.attractors, dtype=np.float64).reshape(-1, 3)
        w = np.asarray(self.weights, dtype=np.float64)
        if sig.ndim != 1 or len(sig) < 1 or sig.shape != ks.shape:
            raise ValidationError("need L >= 1 scales with matching sigma and k lists")
        if np.any(~(sig > 0)) or np.any(~(ks >= 0)) or not np.all(np.isfinite(ks)):
            raise ValidationError("sigmas must be > 0 and k >= 0")
        if w.ndim == 1:
            w = np.broadcast_to(w, (len(sig), len(w)))
        if w.shape != (len(sig), len(att)):
            raise ValidationError(f"weights shape {w.shape} != ({len(sig)}, {len(att)})")
        if np.any(~((w >= 0) & (w <= 1))):
            raise ValidationError("weights must lie in [0, 1]")
        if not np.all(np.isfinite(att)):
            raise ValidationError("attractors must be finite")
        w = np.array(w)
        for arr in (sig, ks, att, w):
            arr.setflags(write=False)
        object.__setattr__(self, "sigmas", sig)
        object.__setattr__(self, "ks", ks)
        object.__setattr__(self, "attractors", att)
        object.__setattr__(self, "weights", w)

    @property
    def n_scales(self) -> int:
        return len(self.sigmas)

    @property
    def active(self) -> bool:
        return bool(np.any((self.weights > 0) & (self.ks[:, None] > 0)))

    def peak_bound(self) -> float:
        """Upper bound on phi: sum_l k_l * sum_p w_lp."""
        return float((self.ks * self.weights.sum(axis=1)).sum())

    def scaled(self, factor: float) -> "GravityFieldSpec":
        return GravityFieldSpec(self.sigmas, self.ks * factor, self.attractors, self.weights)

    def to_json(self, mask_id: str | None = None) -> dict:
        out = {"scales": [{"sigma": float(s), "k": float(k)} for s, k in zip(self.sigmas, self.ks)]}
        if mask_id is not None:
            out["mask_id"] = mask_id
        return out

    @classmethod
    def from_json(cls, data: dict, attractors, weights) -> "GravityFieldSpec":
        scales = data["scales"]
        return cls(
            [s["sigma"] for s in scales], [s["k"] for s in scales], attractors, weights
        )


def _points(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    return arr.reshape(-1, 3), single


def field_terms(spec: GravityFieldSpec, xs: np.ndarray, cutoff: float = math.inf, grad: bool = True):
    """Potential and gradient at many points.

    Terms with ``|x - p| > cutoff * sigma_l`` are dropped. Small problems are
    evaluated densely; large ones go through a k-d tree pair search.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
    n = len(xs)
    phi = np.zeros(n)
    g = np.zeros((n, 3)) if grad else None
    for lvl in range(spec.n_scales):
        k = spec.ks[lvl]
        keep = spec.weights[lvl] > 0
        if k == 0 or not np.any(keep):
            continue
        att = spec.attractors[keep]
        w = spec.weights[lvl][keep] * k
        inv_s2 = 1.0 / spec.sigmas[lvl] ** 2
        radius = cutoff * spec.sigmas[lvl]
        lo = np.minimum(xs.min(axis=0), att.min(axis=0))
        hi = np.maximum(xs.max(axis=0), att.max(axis=0))
        # pair pruning only pays off when the cutoff ball is small next to the data extent
        if n * len(att) <= _DENSE_PAIRS or radius >= 0.5 * np.linalg.norm(hi - lo):
            _dense(xs, att, w, inv_s2, radius, phi, g)
        else:
            _sparse(xs, att, w, inv_s2, radius, phi, g)
    return phi, g


def _dense(xs, att, w, inv_s2, radius, phi, g):
    # squared distances via matrix products on centred coordinates
    c = att.mean(axis=0)
    a = att - c
    a2 = dot3(a, a)
    chunk = max(1, _DENSE_PAIRS // max(len(att), 1))
    for s in range(0, len(xs), chunk):
        x = xs[s : s + chunk] - c
        r2 = np.maximum(dot3(x, x)[:, None] + a2[None, :] - 2.0 * (x @ a.T), 0.0)
        e = w * np.exp(-r2 * inv_s2)
        if math.isfinite(radius):
            e[r2 > radius * radius] = 0.0
        tot = e.sum(axis=1)
        phi[s : s + chunk] += tot
        if g is not None:
            g[s : s + chunk] -= 2.0 * inv_s2 * (x * tot[:, None] - e @ a)


def _sparse(xs, att, w, inv_s2, radius, phi, g):
    if not math.isfinite(radius):
        # no pruning possible; fall back to dense evaluation in chunks
        return _dense(xs, att, w, inv_s2, radius, phi, g)
    pairs = cKDTree(xs).query_ball_tree(cKDTree(att), radius)
    counts = np.fromiter((len(p) for p in pairs), dtype=np.int64, count=len(xs))
    rows = np.repeat(np.arange(len(xs)), counts)
    cols = np.fromiter((j for p in pairs for j in p), dtype=np.int64, count=counts.sum())
    diff = xs[rows] - att[cols]
    r2 = dot3(diff, diff)
    e = np.where(r2 <= radius * radius, w[cols] * np.exp(-r2 * inv_s2), 0.0)
    phi += np.bincount(rows, weights=e, minlength=len(xs))
    if g is not None:
        for c in range(3):
            g[:, c] -= 2.0 * inv_s2 * np.bincount(rows, weights=e * diff[:, c], minlength=len(xs))


def potential(spec: GravityFieldSpec, x):
    xs, single = _points(x)
    phi, _ = field_terms(spec, xs, grad=False)
    return float(phi[0]) if single else phi


def force(spec: GravityFieldSpec, x):
    """Attraction force (the gradient of the potential)."""
    xs, single = _points(x)
    _, g = field_terms(spec, xs)
    return g[0] if single else g


def batch_force(spec: GravityFieldSpec, xs, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """Force at many points, ignoring attractors beyond ``cutoff`` radii."""
    if not cutoff >= 3:
        raise ValidationError("cutoff must be at least 3 (in units of sigma)")
    _, g = field_terms(spec, xs, cutoff=cutoff)
    return g


@dataclass(frozen=True)
class FieldTemplate:
    """Scale layout reused by every stage.

    At a stage with radius ``sigma_scale`` all sigmas are rescaled so that
    the first equals ``sigma_scale``. With ``normalize`` each ``k_l`` is
    multiplied by ``sigma_l**2 / sum_p w_lp``, which turns ``k`` into a
    dimensionless spring stiffness independent of attractor count and radius.
    """

    sigmas: tuple = (0.2, 0.1)
    ks: tuple = (1.0, 1.0)
    cutoff: float = DEFAULT_CUTOFF
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        object.__setattr__(self, "ks", tuple(float(k) for k in self.ks))
        if len(self.sigmas) < 1 or len(self.sigmas) != len(self.ks):
            raise ValidationError("field needs L >= 1 scales with matching sigma and k lists")
        if any(not s > 0 for s in self.sigmas) or any(not k >= 0 for k in self.ks):
            raise ValidationError("field sigmas must be > 0 and k >= 0")
        if not self.cutoff >= 3:
            raise ValidationError("field cutoff must be at least 3")

    def for_stage(self, sigma_scale: float, attractors, weights) -> GravityFieldSpec:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim == 1:
            weights = np.broadcast_to(weights, (len(self.sigmas), len(weights)))
        sig = np.asarray(self.sigmas) * (sigma_scale / self.sigmas[0])
        ks = np.asarray(self.ks, dtype=np.float64)
        if self.normalize:
            mass = weights.sum(axis=1)
            ks = np.where(mass > 0, ks * sig**2 / np.where(mass > 0, mass, 1.0), 0.0)
        return GravityFieldSpec(sig, ks, attractors, weights)

    def to_json(self) -> dict:
        return {
            "scales": [{"sigma": s, "k": k} for s, k in zip(self.sigmas, self.ks)],
            "cutoff": self.cutoff,
            "normalize": self.normalize,
        }
