"""Staged Euler-Maruyama integration of the hand-deformation SDE.

Each hand point follows

    X' = X + alpha*w*F(X)*dt - lam1*grad L_shape*dt - lam2*grad L_normal*dt + g*sqrt(dt)*xi

where F is the attraction force of the stage's Gaussian field, L_shape pulls
points toward a reference template and L_normal rotates contact points so
that they approach their nearest attractor along its surface normal. The
deterministic part is the negative gradient of a per-point energy

    U_i = -alpha*w_i*phi(X_i) + lam1*|X_i - ref_i|^2 + lam2*w_i*(1 - <n, u>)^2

and every step backtracks per point (halving the step) until U_i does not
increase. Normal correspondences are frozen within a step.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .contact import ContactMask
from .errors import ConfigError, CountMismatch, MissingNormals, NonFiniteUpdate
from .field import FieldTemplate, GravityFieldSpec, field_terms
from .geometry import OrientedPointCloud, SurfaceModel, dot3, norm3, vertex_normals, worker_count

log = logging.getLogger(__name__)

STOP_GRADIENT = "GradientBelowEpsilon"
STOP_MAX_ITERS = "MaxIterations"
STOP_CONTACT = "ContactValid"
_DEGENERATE = 1e-9
ANNEAL_FAMILIES = ("constant", "linear-decay", "cosine-decay")


# ----------------------------------------------------------------- config


@dataclass
class NoiseSchedule:
    """Base amplitude ``g0`` (m / sqrt(time)) times a non-increasing anneal factor."""

    g0: float = 1e-4
    anneal: str = "cosine-decay"
    final_fraction: float = 0.0
    spatially_adaptive: bool = False

    def __post_init__(self):
        if not (self.g0 >= 0 and math.isfinite(self.g0)):
            raise ConfigError("noise.g0 must be a finite value >= 0")
        if self.anneal not in ANNEAL_FAMILIES:
            raise ConfigError(f"noise.anneal must be one of {ANNEAL_FAMILIES}")
        if not 0 <= self.final_fraction <= 1:
            raise ConfigError("noise.final_fraction must lie in [0, 1]")

    def factor(self, progress: float) -> float:
        u = min(max(progress, 0.0), 1.0)
        ff = self.final_fraction
        if self.anneal == "constant":
            return 1.0
        if self.anneal == "linear-decay":
            return 1.0 - (1.0 - ff) * u
        return ff + (1.0 - ff) * 0.5 * (1.0 + math.cos(math.pi * u))

    def amplitude(self, progress: float) -> float:
        return self.g0 * self.factor(progress)


@dataclass
class StageSpec:
    sigma_scale: float
    lambda1_mult: float = 1.0
    lambda2_mult: float = 1.0
    noise_mult: float = 1.0
    max_iters: int | None = None

    def __post_init__(self):
        if not self.sigma_scale > 0:
            raise ConfigError("stage sigma_scale must be > 0")
        for name in ("lambda1_mult", "lambda2_mult", "noise_mult"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"stage {name} must be >= 0")
        if self.max_iters is not None and (int(self.max_iters) != self.max_iters or self.max_iters < 1):
            raise ConfigError("stage max_iters must be a positive integer or null")


def default_stages() -> list[StageSpec]:
    return [
        StageSpec(0.2, lambda1_mult=0.5, lambda2_mult=0.25, noise_mult=1.0, max_iters=50),
        StageSpec(0.05, lambda1_mult=1.0, lambda2_mult=1.0, noise_mult=0.5, max_iters=None),
    ]


@dataclass
class BridgeConfig:
    alpha: float = 0.01
    lambda1: float = 0.5
    lambda2: float = 0.2
    dt: float = 1.0
    epsilon: float = 1e-4
    t_max: int = 150
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)
    stages: list = field(default_factory=default_stages)
    contact_tol: float = 0.002
    penetration_tol: float = 0.0005
    check_contact: bool = True
    adaptive_step: bool = True
    max_halvings: int = 20
    max_step: float = 0.005

    def __post_init__(self):
        if not (self.alpha > 0 and self.dt > 0):
            raise ConfigError("alpha and dt must be > 0")
        if not self.epsilon >= 0:
            raise ConfigError("epsilon must be >= 0")
        if not (self.lambda1 >= 0 and self.lambda2 >= 0):
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if int(self.t_max) != self.t_max or self.t_max < 1:
            raise ConfigError("t_max must be an integer >= 1")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        radii = [s.sigma_scale for s in self.stages]
        if any(b >= a for a, b in zip(radii, radii[1:])):
            raise ConfigError("stage sigma_scale must strictly decrease")
        if any(s.max_iters is None for s in self.stages[:-1]):
            raise ConfigError("only the last stage may leave max_iters open")
        if not (self.contact_tol > 0 and self.penetration_tol >= 0):
            raise ConfigError("contact_tol must be > 0 and penetration_tol >= 0")
        if not self.max_step > 0:
            raise ConfigError("max_step must be > 0 (use inf to disable)")
        if int(self.max_halvings) != self.max_halvings or self.max_halvings < 0:
            raise ConfigError("max_halvings must be a non-negative integer")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TemplatePrior:
    """Reference position per hand point; ``params`` holds optional pose/shape metadata."""

    reference: OrientedPointCloud
    params: dict = field(default_factory=dict)


# ------------------------------------------------------------------ losses


def shape_prior_loss(hand: OrientedPointCloud, prior: TemplatePrior) -> float:
    _check_prior(hand, prior)
    d = hand.points - prior.reference.points
    return float(dot3(d, d).sum())


def shape_prior_gradient(hand: OrientedPointCloud, prior: TemplatePrior) -> np.ndarray:
    _check_prior(hand, prior)
    return 2.0 * (hand.points - prior.reference.points)


def _check_prior(hand, prior):
    if len(hand) != len(prior.reference):
        raise CountMismatch(f"prior has {len(prior.reference)} points for a {len(hand)}-point hand")


def _normal_terms(x, p, n, w):
    """Per-point alignment loss and gradient with frozen (p, n)."""
    d = x - p
    r = norm3(d)
    degenerate = r <= _DEGENERATE
    safe = np.where(degenerate, 1.0, r)
    u = d / safe[:, None]
    c = dot3(n, u)
    loss = np.where(degenerate, 0.0, w * (1.0 - c) ** 2)
    grad = (-2.0 * w * (1.0 - c) / safe)[:, None] * (n - c[:, None] * u)
    grad[degenerate] = 0.0
    return loss, grad, degenerate


def surface_correspondence(obj: SurfaceModel, xs: np.ndarray):
    """Nearest surface point and its outward normal (mesh projection, or nearest sample)."""
    p, n, _, _ = obj.nearest(xs)
    if n is None:
        raise MissingNormals("normal alignment needs an oriented object surface")
    return p, n


def normal_alignment(hand_contact: OrientedPointCloud, obj: SurfaceModel, mask: ContactMask):
    """Alignment loss over masked hand points and its gradient (correspondences frozen).

    Each hand point with positive weight is compared with its nearest surface
    point ``p`` and that point's normal. Returns ``(loss, gradients,
    n_degenerate)``; points coinciding with ``p`` are skipped and counted.
    """
    grads = np.zeros_like(hand_contact.points)
    sel = np.nonzero(mask.hand_weights > 0)[0]
    if len(sel) == 0:
        return 0.0, grads, 0
    x = hand_contact.points[sel]
    p, n = surface_correspondence(obj, x)
    loss, g, deg = _normal_terms(x, p, n, mask.hand_weights[sel])
    grads[sel] = g
    return float(loss.sum()), grads, int(deg.sum())


# -------------------------------------------------------------- validity


def contact_validity(
    hand: OrientedPointCloud,
    obj: SurfaceModel,
    mask: ContactMask,
    tol: float = 0.002,
    penetration_tol: float | None = None,
    threshold: float = 0.5,
) -> bool:
    """True when nothing penetrates deeper than ``penetration_tol`` (default ``tol``)
    and every attractor has a masked hand point within ``tol``.

    Attractors and masked hand points are those with weight >= ``threshold``.
    """
    pen = tol if penetration_tol is None else penetration_tol
    attractors = obj.cloud.points[mask.object_weights >= threshold]
    if len(attractors):
        masked = hand.points[mask.hand_weights >= threshold]
        if len(masked) == 0:
            return False
        d, j = cKDTree(masked).query(attractors, k=1, workers=worker_count())
        # exact distances so the verdict does not hinge on tree rounding
        d = norm3(attractors - masked[j])
        if np.any(d > tol):
            return False
    return _deepest_penetration(hand.points, obj) <= pen


def _deepest_penetration(points: np.ndarray, obj: SurfaceModel) -> float:
    if obj.is_mesh:
        box = np.all((points >= obj.bounds[0]) & (points <= obj.bounds[1]), axis=1)
        if not np.any(box):
            return 0.0
        cand = points[box]
        inside = obj.inside(cand)
        if not np.any(inside):
            return 0.0
        return float(obj.unsigned_distance(cand[inside]).max())
    sd = obj.signed_distance(points)
    return float(max(0.0, -sd.min()))


# ------------------------------------------------------------------- trace


@dataclass
class StepRecord:
    iteration: int
    stage: int
    U: float
    U_before: float
    phi_total: float
    shape_loss: float
    normal_loss: float
    grad_norm: float
    drift_norm: float
    noise_amp: float
    step_scale: float
    held: int
    degenerate: int


TRACE_COLUMNS = (
    "iteration", "U", "phi_total", "shape_loss", "normal_loss", "noise_amp", "stage",
    "U_before", "grad_norm", "drift_norm", "step_scale", "held", "degenerate",
)


@dataclass
class BridgeTrace:
    records: list = field(default_factory=list)
    stop_reason: str | None = None
    stage_starts: list = field(default_factory=list)
    stage_sigmas: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(TRACE_COLUMNS)
        for r in self.records:
            wr.writerow([_fmt(getattr(r, c)) for c in TRACE_COLUMNS])
        return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# ---------------------------------------------------------------- stepper


def noise_rng(seed: int, iteration: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, iteration); row i of a draw belongs to point i."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(iteration)])))


class _Stepper:
    """Per-scene state reused across iterations (attractor index, weights)."""

    def __init__(self, obj, mask, prior, cfg: BridgeConfig):
        self.obj = obj
        self.mask = mask
        self.cfg = cfg
        self.ref = prior.reference.points
        self.w = mask.hand_weights
        self.sel = np.nonzero(self.w > 0)[0]

    def energies(self, x, rows, field_spec, lam1, lam2, p, n, cutoff):
        """Per-point energy for the hand points ``rows`` placed at ``x``."""
        d = x - self.ref[rows]
        e = lam1 * dot3(d, d)
        w = self.w[rows]
        m = w > 0
        if np.any(m) and field_spec is not None:
            phi, _ = field_terms(field_spec, x[m], cutoff=cutoff, grad=False)
            e[m] -= self.cfg.alpha * w[m] * phi
        if lam2 > 0 and p is not None:
            loss, _, _ = _normal_terms(x, p[rows], n[rows], w)
            e += lam2 * loss
        return e

    def step(self, x, field_spec: GravityFieldSpec | None, stage: StageSpec, cutoff, g_amp, rng):
        cfg = self.cfg
        n_pts = len(x)
        lam1 = cfg.lambda1 * stage.lambda1_mult
        lam2 = cfg.lambda2 * stage.lambda2_mult
        all_rows = np.arange(n_pts)

        force = np.zeros_like(x)
        phi_sel = np.zeros(0)
        if field_spec is not None and len(self.sel):
            phi_sel, f_sel = field_terms(field_spec, x[self.sel], cutoff=cutoff)
            force[self.sel] = f_sel
        wf = self.w[:, None] * force
        grad_norm = float(norm3(wf).max()) if n_pts else 0.0

        p = n = None
        degenerate = 0
        g_normal = np.zeros_like(x)
        if lam2 > 0 and len(self.sel):
            p = np.zeros_like(x)
            n = np.zeros_like(x)
            p[self.sel], n[self.sel] = surface_correspondence(self.obj, x[self.sel])
            _, g_sel, deg = _normal_terms(x[self.sel], p[self.sel], n[self.sel], self.w[self.sel])
            g_normal[self.sel] = g_sel
            degenerate = int(deg.sum())

        with np.errstate(over="ignore", invalid="ignore"):
            drift = cfg.alpha * wf - lam1 * 2.0 * (x - self.ref) - lam2 * g_normal
        if not np.all(np.isfinite(drift)):
            raise NonFiniteUpdate(f"non-finite drift at {int((~np.isfinite(drift)).any(axis=1).sum())} points")

        e0 = self.energies(x, all_rows, field_spec, lam1, lam2, p, n, cutoff)
        # trust radius: no point's drift displacement exceeds max_step
        length = norm3(drift) * cfg.dt
        scale = cfg.dt * np.minimum(1.0, cfg.max_step / np.where(length > 0, length, 1.0))
        step = drift * scale[:, None]
        new = x + step
        held = 0
        e_acc = None
        if cfg.adaptive_step:
            e_acc = self.energies(new, all_rows, field_spec, lam1, lam2, p, n, cutoff)
            pending = ~(e_acc <= e0)
            rows = np.nonzero(pending)[0]
            if len(rows):
                # line search over dt/2, dt/4, ...: keep the lowest-energy candidate
                best = np.full(len(rows), np.inf)
                best_x = x[rows].copy()
                best_s = np.zeros(len(rows))
                for h in range(1, cfg.max_halvings + 1):
                    cand = x[rows] + step[rows] * 0.5**h
                    ec = self.energies(cand, rows, field_spec, lam1, lam2, p, n, cutoff)
                    ok = (ec <= e0[rows]) & (ec < best)
                    best[ok] = ec[ok]
                    best_x[ok] = cand[ok]
                    best_s[ok] = scale[rows[ok]] * 0.5**h
                found = np.isfinite(best)
                # points with no acceptable candidate stay put this step
                new[rows] = np.where(found[:, None], best_x, x[rows])
                e_acc[rows] = np.where(found, best, e0[rows])
                scale[rows] = best_s
                held = int((~found).sum())

        if g_amp > 0:
            e_acc = None
            xi = rng.standard_normal((n_pts, 3))
            amp = np.full(n_pts, g_amp)
            if cfg.noise.spatially_adaptive:
                fmag = norm3(wf)
                top = fmag.max()
                amp = g_amp * (fmag / top if top > 0 else np.zeros(n_pts))
            new = new + (amp * math.sqrt(cfg.dt))[:, None] * xi

        if not np.all(np.isfinite(new)):
            bad = int((~np.isfinite(new)).any(axis=1).sum())
            raise NonFiniteUpdate(f"update produced non-finite coordinates at {bad} points")

        # accepted per-point energies are reused so that U <= U_before holds exactly
        e_after = e_acc if e_acc is not None else self.energies(new, all_rows, field_spec, lam1, lam2, p, n, cutoff)
        d = new - self.ref
        phi_total = 0.0
        normal_loss = 0.0
        if field_spec is not None and len(self.sel):
            phi_after, _ = field_terms(field_spec, new[self.sel], cutoff=cutoff, grad=False)
            phi_total = float((self.w[self.sel] * phi_after).sum())
        if p is not None:
            nl, _, _ = _normal_terms(new[self.sel], p[self.sel], n[self.sel], self.w[self.sel])
            normal_loss = float(nl.sum())
        info = dict(
            U=float(e_after.sum()),
            U_before=float(e0.sum()),
            phi_total=phi_total,
            shape_loss=float(dot3(d, d).sum()),
            normal_loss=normal_loss,
            grad_norm=grad_norm,
            drift_norm=float(np.sqrt(dot3(drift, drift).mean())),
            noise_amp=float(g_amp),
            step_scale=float(scale.mean()),
            held=held,
            degenerate=degenerate,
        )
        return new, info


def build_stage_field(
    template: FieldTemplate, stage: StageSpec, obj: SurfaceModel, mask: ContactMask
) -> GravityFieldSpec | None:
    weights = mask.object_weights_per_scale(len(template.sigmas))
    keep = np.any(weights > 0, axis=0)
    if not np.any(keep):
        return None
    return template.for_stage(stage.sigma_scale, obj.cloud.points[keep], weights[:, keep])


def euler_maruyama_step(
    hand: OrientedPointCloud,
    field_spec: GravityFieldSpec | None,
    prior: TemplatePrior,
    obj: SurfaceModel,
    mask: ContactMask,
    cfg: BridgeConfig,
    stage: StageSpec,
    rng: np.random.Generator | None = None,
    progress: float = 0.0,
    cutoff: float = math.inf,
):
    """One update of every hand point; returns ``(new hand, step info dict)``.

    ``rng`` is only drawn from when the stage's noise amplitude is positive.
    """
    _check_prior(hand, prior)
    mask.check_against(hand, obj)
    g_amp = cfg.noise.amplitude(progress) * stage.noise_mult
    if g_amp > 0 and rng is None:
        raise ConfigError("noise is on but no random generator was supplied")
    stepper = _Stepper(obj, mask, prior, cfg)
    new, info = stepper.step(hand.points, field_spec, stage, cutoff, g_amp, rng)
    return hand.with_points(new), info


def run_bridge(scene, cfg: BridgeConfig, seed: int = 0, field_template: FieldTemplate | None = None):
    """Run all stages until a stop condition holds.

    Stop conditions, checked after every iteration: the largest weighted
    attraction force at the start of the step fell below ``epsilon``; the
    iteration count reached ``t_max`` (or every stage budget is spent); in
    the final stage only, the contact-validity test passes.

    Returns ``(refined hand, BridgeTrace)``.
    """
    template = field_template or FieldTemplate()
    hand, obj, mask, prior = scene.hand, scene.object, scene.mask, scene.prior
    _check_prior(hand, prior)
    mask.check_against(hand, obj)
    stepper = _Stepper(obj, mask, prior, cfg)
    trace = BridgeTrace()
    x = hand.points.copy()
    trace.snapshots.append(x.copy())
    t = 0
    last = len(cfg.stages) - 1
    stop = None
    for si, stage in enumerate(cfg.stages):
        spec = build_stage_field(template, stage, obj, mask)
        budget = stage.max_iters if stage.max_iters is not None else cfg.t_max
        trace.stage_starts.append(t + 1)
        trace.stage_sigmas.append(stage.sigma_scale)
        for _ in range(int(budget)):
            t += 1
            g_amp = cfg.noise.amplitude((t - 1) / cfg.t_max) * stage.noise_mult
            rng = noise_rng(seed, t) if g_amp > 0 else None
            x, info = stepper.step(x, spec, stage, template.cutoff, g_amp, rng)
            trace.records.append(StepRecord(iteration=t, stage=si, **info))
            if info["grad_norm"] < cfg.epsilon:
                stop = STOP_GRADIENT
            elif (
                si == last
                and cfg.check_contact
                and contact_validity(
                    hand.with_points(x), obj, mask, cfg.contact_tol, cfg.penetration_tol
                )
            ):
                stop = STOP_CONTACT
            elif t >= cfg.t_max:
                stop = STOP_MAX_ITERS
            if stop:
                break
        trace.snapshots.append(x.copy())
        if stop:
            break
    trace.stop_reason = stop or STOP_MAX_ITERS
    normals = hand.normals
    faces = getattr(scene, "hand_faces", None)
    if faces is not None:
        normals = vertex_normals(x, faces)
    log.info("bridge stopped after %d iterations: %s", t, trace.stop_reason)
    return OrientedPointCloud(x, normals, hand.labels), trace
