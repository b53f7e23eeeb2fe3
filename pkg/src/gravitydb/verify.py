"""Acceptance checks shared by ``gravitydb verify`` and the test suite.

Each check builds its own inputs, computes the quantity under test and an
independent reference (closed form, finite differences or brute force), and
returns a :class:`CheckResult`.
"""

from __future__ import annotations

import filecmp
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bridge import (
    STOP_GRADIENT,
    STOP_MAX_ITERS,
    BridgeConfig,
    NoiseSchedule,
    TemplatePrior,
    contact_validity,
    normal_alignment,
    run_bridge,
)
from .contact import ContactMask, nearest_point_mask, ray_based_mask, ray_triangle_t
from .field import FieldTemplate, GravityFieldSpec, force, potential
from .geometry import (
    OrientedPointCloud,
    SurfaceModel,
    closest_point_on_triangles,
    norm3,
    solid_angle_winding_number,
    unit,
)
from .metrics import intersection_volume, penetration_depth, proximity_error
from .scenes import KINDS, Scene, box_mesh, make_grasp_scene


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.number:>2} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(number, name, fn, *args, **kwargs) -> CheckResult:
    t0 = time.perf_counter()
    passed, detail, values = fn(*args, **kwargs)
    return CheckResult(number, name, bool(passed), detail, time.perf_counter() - t0, values)


def quiet_config(**kw) -> BridgeConfig:
    """Default bridge settings with noise switched off."""
    kw.setdefault("noise", NoiseSchedule(g0=0.0))
    return BridgeConfig(**kw)


# ---------------------------------------------------------------- oracles


def brute_unsigned_distance(obj: SurfaceModel, xs: np.ndarray) -> np.ndarray:
    """Distance to the closest of all triangles, no spatial index."""
    a, b, c = obj._tri
    out = np.empty(len(xs))
    for i, x in enumerate(xs):
        cp = closest_point_on_triangles(np.broadcast_to(x, a.shape), a, b, c)
        out[i] = norm3(x - cp).min()
    return out


def brute_signed_distance(obj: SurfaceModel, xs: np.ndarray) -> np.ndarray:
    d = brute_unsigned_distance(obj, xs)
    inside = solid_angle_winding_number(obj.vertices, obj.faces, xs) > 0.5
    return np.where(inside, -d, d)


def brute_nearest_point_mask(hand: OrientedPointCloud, obj: SurfaceModel, tau: float, softness: float):
    d = brute_unsigned_distance(obj, hand.points)
    hw = np.where(d <= tau, 1.0, np.exp(-(((d - tau) / softness) ** 2)))
    samples = obj.cloud.points
    ow = np.zeros(len(samples))
    for i, x in enumerate(hand.points):
        j = int(np.argmin(norm3(x - samples)))
        ow[j] = max(ow[j], hw[i])
    return hw, ow


def brute_ray_mask(hand: OrientedPointCloud, obj: SurfaceModel, max_range: float):
    a, b, c = obj._tri
    dirs = -hand.normals
    t_hit = np.full(len(hand), np.inf)
    for i, (o, d) in enumerate(zip(hand.points, dirs)):
        t = ray_triangle_t(np.broadcast_to(o, a.shape), np.broadcast_to(d, a.shape), a, b, c)
        t = t[t <= max_range]
        if len(t):
            t_hit[i] = t.min()
    hit = np.isfinite(t_hit)
    samples = obj.cloud.points
    gaps = np.array([np.delete(norm3(p - samples), i).min() for i, p in enumerate(samples)])
    spacing = float(gaps.mean())
    hits = hand.points[hit] + dirs[hit] * t_hit[hit, None]
    ow = np.array([float(len(hits) > 0 and np.any(norm3(p - hits) <= spacing)) for p in samples])
    return hit.astype(np.float64), ow


# ----------------------------------------------------------------- checks


def gradient_consistency(n_specs: int = 100, seed: int = 0, rtol: float = 1e-4, budget: float = 5.0):
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n_specs):
        n_scales = int(rng.integers(1, 4))
        m = int(rng.integers(1, 30))
        sigmas = np.sort(rng.uniform(0.01, 0.2, n_scales))[::-1]
        spec = GravityFieldSpec(sigmas, rng.uniform(0.1, 2.0, n_scales), rng.normal(0, 0.05, (m, 3)), rng.random((n_scales, m)))
        smin = sigmas.min()
        while True:
            x = spec.attractors[rng.integers(m)] + rng.normal(0, smin, 3)
            f = force(spec, x)
            if np.linalg.norm(f) > 1e-3 * spec.peak_bound() / sigmas.max():
                break
        h = 1e-5 * smin
        fd = np.array([(potential(spec, x + h * e) - potential(spec, x - h * e)) / (2 * h) for e in np.eye(3)])
        worst = max(worst, float(np.linalg.norm(f - fd) / np.linalg.norm(f)))
    elapsed = time.perf_counter() - t0
    ok = worst <= rtol and elapsed < budget
    return ok, f"worst relative error {worst:.2e} over {n_specs} specs in {elapsed:.2f}s", {"worst": worst, "elapsed": elapsed}


def descent_property(n_scenes: int = 20, points: int = 600, iterations: int = 60):
    worst = -np.inf
    records = 0
    for i in range(n_scenes):
        rng = np.random.default_rng(1000 + i)
        kind = KINDS[i % 3]
        defect = ("penetration", "gap", "none")[int(rng.integers(3))]
        sc = make_grasp_scene(kind, defect, float(rng.uniform(0.001, 0.008)), seed=i, point_count=points, object_points=1500)
        if i % 2:
            jitter = sc.hand.points + rng.normal(0, 0.002, sc.hand.points.shape)
            sc.hand = sc.hand.with_points(jitter)
            sc.mask = nearest_point_mask(sc.hand, sc.object, tau=0.004)
        cfg = quiet_config(epsilon=0.0, check_contact=False, t_max=iterations)
        _, tr = run_bridge(sc, cfg, seed=i)
        rise = tr.column("U") - tr.column("U_before")
        worst = max(worst, float(rise.max()))
        records += tr.iterations
    ok = worst <= 0.0
    return ok, f"max per-iteration change in U {worst:.3e} over {records} iterations", {"worst_rise": worst}


def penetration_repair(kinds=KINDS, points: int = 8192, budget: float = 30.0):
    rows, ok = [], True
    values = {}
    for kind in kinds:
        sc = make_grasp_scene(kind, "penetration", 0.005, seed=0, point_count=points, object_points=points)
        t0 = time.perf_counter()
        out, tr = run_bridge(sc, BridgeConfig(), seed=0)
        elapsed = time.perf_counter() - t0
        pds = [penetration_depth(s, sc.object) for s in tr.snapshots]
        final = penetration_depth(out, sc.object)
        monotone = all(b <= a for a, b in zip(pds, pds[1:]))
        good = final <= 0.5 and monotone and elapsed <= budget
        ok &= good
        values[kind] = {"pd_boundaries": pds, "pd_final": final, "seconds": elapsed, "stop": tr.stop_reason}
        rows.append(f"{kind} PD {pds[0]:.2f}->{final:.3f}mm in {elapsed:.1f}s")
    return ok, "; ".join(rows), values


def gap_closure(kinds=KINDS, points: int = 8192):
    rows, ok = [], True
    values = {}
    cfg = BridgeConfig()
    for kind in kinds:
        sc = make_grasp_scene(kind, "gap", 0.005, seed=0, point_count=points, object_points=points)
        pe0 = proximity_error(sc.hand, sc.gt_hand, sc.object)
        out, tr = run_bridge(sc, cfg, seed=0)
        pe = proximity_error(out, sc.gt_hand, sc.object)
        valid = contact_validity(out, sc.object, sc.mask, cfg.contact_tol, cfg.penetration_tol)
        reduction = 1.0 - pe / pe0
        good = valid and reduction >= 0.8
        ok &= good
        values[kind] = {"pe0": pe0, "pe": pe, "valid": valid, "stop": tr.stop_reason}
        rows.append(f"{kind} valid={valid} PE {pe0:.2f}->{pe:.3f}mm ({100 * reduction:.1f}% lower)")
    return ok, "; ".join(rows), values


def prior_anchoring(points: int = 2048, t_max: int = 150):
    sc = make_grasp_scene("sphere", "penetration", 0.005, seed=3, point_count=points, object_points=2048)
    cfg = quiet_config(lambda1=1e6, lambda2=0.0, epsilon=0.0, check_contact=False, t_max=t_max)
    out, tr = run_bridge(sc, cfg, seed=0, field_template=FieldTemplate(ks=(0.0, 0.0)))
    err = float(norm3(out.points - sc.prior.reference.points).max())
    ok = err <= 1e-6 and tr.iterations == t_max
    return ok, f"max distance to reference {err:.2e} m after {tr.iterations} iterations", {"max_err": err}


def plane_scene(n_hand: int = 400, seed: int = 0) -> Scene:
    """Flat sampled plane (z = 0) with a masked disk; a tilted hand patch sits below it."""
    g = np.arange(-0.05, 0.05 + 1e-9, 0.002)
    gx, gy = np.meshgrid(g, g)
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    obj = SurfaceModel(OrientedPointCloud(pts, np.tile([0.0, 0.0, 1.0], (len(pts), 1))))
    rng = np.random.default_rng(seed)
    r = 0.01 * np.sqrt(rng.random(n_hand))
    th = rng.random(n_hand) * 2 * np.pi
    tilt = np.pi / 4
    local = np.column_stack([r * np.cos(th), r * np.sin(th) * np.cos(tilt), r * np.sin(th) * np.sin(tilt)])
    hand = OrientedPointCloud(local + [0.0, 0.0, -0.012], np.tile([0.0, 0.0, 1.0], (n_hand, 1)))
    ow = (np.linalg.norm(pts[:, :2], axis=1) < 0.01).astype(np.float64)
    mask = ContactMask(np.ones(n_hand), ow, "external")
    return Scene(hand, obj, mask, TemplatePrior(hand))


def normal_alignment_check():
    sc = plane_scene()
    n = len(sc.hand)
    losses = {}
    for lam2 in (0.2, 0.0):
        cfg = quiet_config(lambda1=0.0, lambda2=lam2, epsilon=0.0, check_contact=False)
        out, _ = run_bridge(sc, cfg, seed=0, field_template=FieldTemplate(ks=(0.0, 0.0)))
        loss, _, _ = normal_alignment(out, sc.object, sc.mask)
        losses[lam2] = loss / n
    ok = losses[0.2] < 0.05 and losses[0.0] >= 1.0
    return ok, f"mean loss per contact point {losses[0.2]:.2e} with lambda2=0.2, {losses[0.0]:.3f} with lambda2=0", losses


def metric_oracles(n_scenes: int = 20, resolution: int = 128):
    v, f = box_mesh((1.0, 1.0, 1.0))
    a = SurfaceModel(vertices=v + 0.5, faces=f)
    b = SurfaceModel(vertices=v + [1.0, 0.5, 0.5], faces=f)
    iv = intersection_volume(a, b, resolution)
    expected = 0.5 * 1e6
    iv_err = abs(iv - expected) / expected
    mismatches = 0
    for i in range(n_scenes):
        rng = np.random.default_rng(2000 + i)
        kind = KINDS[i % 3]
        defect = ("penetration", "gap", "none")[i % 3]
        sc = make_grasp_scene(kind, defect, float(rng.uniform(0.001, 0.008)), seed=i, point_count=300, object_points=500)
        pred = sc.hand.with_points(sc.hand.points + rng.normal(0, 0.003, sc.hand.points.shape))
        sd = brute_signed_distance(sc.object, pred.points)
        pd_ref = float(np.maximum(0.0, -sd).max() * 1000.0)
        d_pred = brute_unsigned_distance(sc.object, pred.points)
        d_gt = brute_unsigned_distance(sc.object, sc.gt_hand.points)
        pe_ref = float(np.abs(d_pred - d_gt).mean() * 1000.0)
        pd = penetration_depth(pred, sc.object)
        pe = proximity_error(pred, sc.gt_hand, sc.object)
        mismatches += int(pd != pd_ref) + int(pe != pe_ref)
    ok = iv_err <= 0.02 and mismatches == 0
    return ok, f"IV {iv:.0f} cm3 vs {expected:.0f} ({100 * iv_err:.2f}% off); {mismatches} PD/PE mismatches over {n_scenes} scenes", {
        "iv": iv,
        "iv_rel_err": iv_err,
        "mismatches": mismatches,
    }


def mask_oracles(n_scenes: int = 20):
    mismatches = 0
    for i in range(n_scenes):
        rng = np.random.default_rng(3000 + i)
        kind = KINDS[i % 3]
        sc = make_grasp_scene(kind, ("penetration", "gap", "none")[i % 3], 0.003, seed=i, point_count=200, object_points=400)
        pts = sc.hand.points + rng.normal(0, 0.004, sc.hand.points.shape)
        normals = sc.hand.normals.copy()
        flip = rng.random(len(normals)) < 0.2
        normals[flip] = unit(rng.normal(size=(int(flip.sum()), 3)))
        hand = OrientedPointCloud(pts, normals)
        tau = float(rng.uniform(0.002, 0.01))
        m = nearest_point_mask(hand, sc.object, tau, tau / 2)
        hw, ow = brute_nearest_point_mask(hand, sc.object, tau, tau / 2)
        mismatches += int(not np.array_equal(m.hand_weights, hw)) + int(not np.array_equal(m.object_weights, ow))
        rm = ray_based_mask(hand, sc.object, 0.05)
        rhw, row = brute_ray_mask(hand, sc.object, 0.05)
        mismatches += int(not np.array_equal(rm.hand_weights, rhw)) + int(not np.array_equal(rm.object_weights, row))
    return mismatches == 0, f"{mismatches} mismatching weight arrays over {n_scenes} scenes", {"mismatches": mismatches}


def determinism(points: int = 2048):
    from .cli import main

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        scene = tmp / "scene"
        rc = main(["gen", "--kind", "sphere", "--defect", "penetration", "--points", str(points), "--object-points", "4096", "--out", str(scene)])
        outs = []
        for k in range(2):
            out = tmp / f"run{k}"
            rc |= main(["refine", str(scene), "--out", str(out), "--seed", "7"])
            outs.append(out)
        names = sorted(p.name for p in outs[0].iterdir())
        same = names == sorted(p.name for p in outs[1].iterdir()) and all(
            filecmp.cmp(outs[0] / n, outs[1] / n, shallow=False) for n in names
        )
    ok = rc == 0 and same
    return ok, f"{len(names)} output files {'identical' if same else 'differ'} across two runs", {"files": names}


def stopping_rules(points: int = 2048):
    sc = make_grasp_scene("sphere", "gap", 0.005, seed=0, point_count=points, object_points=1000)
    _, tr_a = run_bridge(sc, BridgeConfig(epsilon=1e9), seed=0)
    # attractors everywhere on the object: five pads can never cover them all
    sc.mask = ContactMask(sc.mask.hand_weights, np.ones(len(sc.object.cloud)), "external")
    cfg = BridgeConfig(epsilon=0.0)
    _, tr_b = run_bridge(sc, cfg, seed=0)
    ok = (
        tr_a.iterations == 1
        and tr_a.stop_reason == STOP_GRADIENT
        and tr_b.iterations == cfg.t_max
        and tr_b.stop_reason == STOP_MAX_ITERS
    )
    detail = (
        f"epsilon=1e9: {tr_a.stop_reason} at {tr_a.iterations}; "
        f"epsilon=0: {tr_b.stop_reason} at {tr_b.iterations}"
    )
    return ok, detail, {"a": (tr_a.iterations, tr_a.stop_reason), "b": (tr_b.iterations, tr_b.stop_reason)}


CHECKS = (
    (1, "gradient consistency", gradient_consistency),
    (2, "descent property", descent_property),
    (3, "penetration repair", penetration_repair),
    (4, "gap closure", gap_closure),
    (5, "shape-prior anchoring", prior_anchoring),
    (6, "normal alignment", normal_alignment_check),
    (7, "metric oracles", metric_oracles),
    (8, "mask oracles", mask_oracles),
    (9, "determinism", determinism),
    (10, "stopping rules", stopping_rules),
)


def run_check(number: int, **kwargs) -> CheckResult:
    num, name, fn = CHECKS[number - 1]
    return _timed(num, name, fn, **kwargs)


def run_all(quick: bool = False) -> list[CheckResult]:
    """Run every check; ``quick`` shrinks scene sizes (timing criteria still apply)."""
    small = {
        2: {"n_scenes": 6},
        3: {"points": 2048},
        4: {"points": 2048},
        7: {"n_scenes": 5},
        8: {"n_scenes": 5},
    }
    return [run_check(n, **(small.get(n, {}) if quick else {})) for n, _, _ in CHECKS]
