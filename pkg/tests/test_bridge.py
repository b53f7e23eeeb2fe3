import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gravitydb.bridge import (
    STOP_CONTACT,
    STOP_GRADIENT,
    STOP_MAX_ITERS,
    TRACE_COLUMNS,
    BridgeConfig,
    NoiseSchedule,
    StageSpec,
    TemplatePrior,
    _normal_terms,
    contact_validity,
    euler_maruyama_step,
    noise_rng,
    normal_alignment,
    run_bridge,
    shape_prior_gradient,
    shape_prior_loss,
)
from gravitydb.contact import ContactMask
from gravitydb.errors import ConfigError, CountMismatch, NonFiniteUpdate
from gravitydb.field import FieldTemplate, GravityFieldSpec, force
from gravitydb.geometry import OrientedPointCloud, SurfaceModel
from gravitydb.metrics import penetration_depth
from gravitydb.scenes import Scene, make_grasp_scene
from gravitydb.verify import brute_signed_distance, plane_scene, quiet_config


def cloud(pts, normals=None):
    return OrientedPointCloud(np.asarray(pts, float), normals)


def plane_surface():
    return SurfaceModel(cloud([[0.0, 0, 0]], [[0.0, 0, 1]]))


# ---------------------------------------------------------------- losses


def test_shape_prior_examples():
    ref = cloud(np.random.default_rng(0).normal(size=(5, 3)))
    prior = TemplatePrior(ref)
    assert shape_prior_loss(ref, prior) == 0.0
    assert np.all(shape_prior_gradient(ref, prior) == 0)
    moved = ref.points.copy()
    moved[2] += [0.01, 0, 0]
    g = shape_prior_gradient(ref.with_points(moved), prior)
    assert np.allclose(g[2], [0.02, 0, 0], rtol=1e-12)
    assert np.all(np.delete(g, 2, axis=0) == 0)
    with pytest.raises(CountMismatch):
        shape_prior_gradient(cloud(np.zeros((4, 3))), prior)


def test_shape_prior_gradient_finite_differences():
    rng = np.random.default_rng(1)
    ref = cloud(rng.normal(size=(6, 3)))
    x = ref.points + rng.normal(0, 0.1, (6, 3))
    g = shape_prior_gradient(ref.with_points(x), TemplatePrior(ref))
    h = 1e-6
    fd = np.zeros_like(x)
    for i in range(6):
        for c in range(3):
            xp, xm = x.copy(), x.copy()
            xp[i, c] += h
            xm[i, c] -= h
            fd[i, c] = (shape_prior_loss(ref.with_points(xp), TemplatePrior(ref)) - shape_prior_loss(ref.with_points(xm), TemplatePrior(ref))) / (2 * h)
    assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(g)


def test_normal_alignment_examples():
    obj = plane_surface()
    mask = ContactMask([1.0, 1.0, 0.0], [1.0])
    hand = cloud([[0.0, 0, 0.01], [0.0, 0, -0.01], [0.0, 0, -0.5]])
    loss, grads, deg = normal_alignment(hand, obj, mask)
    assert loss == pytest.approx(4.0)  # 0 for the aligned point, 4 for the antiparallel one
    assert deg == 0 and np.all(grads[2] == 0)
    loss, _, deg = normal_alignment(cloud([[0.0, 0, 0], [0, 0, 1.0], [0, 0, 1.0]]), obj, mask)
    assert deg == 1 and loss == 0.0


def test_normal_gradient_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 3))
    p = rng.normal(size=(20, 3))
    n = rng.normal(size=(20, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    w = rng.random(20)
    _, g, _ = _normal_terms(x, p, n, w)
    h = 1e-6
    for i in range(20):
        fd = np.zeros(3)
        for c in range(3):
            xp, xm = x[i : i + 1].copy(), x[i : i + 1].copy()
            xp[0, c] += h
            xm[0, c] -= h
            fd[c] = (_normal_terms(xp, p[i : i + 1], n[i : i + 1], w[i : i + 1])[0][0] - _normal_terms(xm, p[i : i + 1], n[i : i + 1], w[i : i + 1])[0][0]) / (2 * h)
        assert np.linalg.norm(g[i] - fd) <= 1e-5 * max(np.linalg.norm(g[i]), 1e-12)


# ---------------------------------------------------------------- one step


def test_single_point_step_matches_force():
    sigma, d = 1.0, 0.5
    spec = GravityFieldSpec([sigma], [1.0], np.zeros((1, 3)), [[1.0]])
    x0 = np.array([[d, 0.0, 0.0]])
    hand = cloud(x0)
    cfg = quiet_config(lambda1=0.0, lambda2=0.0, max_step=math.inf)
    stage = StageSpec(sigma)
    out, info = euler_maruyama_step(hand, spec, TemplatePrior(hand), plane_surface(), ContactMask([1.0], [1.0]), cfg, stage)
    disp = out.points - x0
    expected = cfg.alpha * (2 * d / sigma**2) * math.exp(-(d**2) / sigma**2) * cfg.dt
    assert np.allclose(disp, [[-expected, 0, 0]], rtol=1e-12)
    assert np.allclose(disp[0], cfg.alpha * force(spec, x0[0]), rtol=1e-12)
    assert info["U"] <= info["U_before"]


def test_fixed_point_at_attractor_and_reference():
    spec = GravityFieldSpec([0.1], [1.0], np.zeros((1, 3)), [[1.0]])
    hand = cloud([[0.0, 0, 0]], [[0.0, 0, 1]])
    obj = SurfaceModel(cloud([[0.0, 0, 0]], [[0.0, 0, 1]]))
    out, info = euler_maruyama_step(hand, spec, TemplatePrior(hand), obj, ContactMask([1.0], [1.0]), quiet_config(), StageSpec(0.1))
    assert np.array_equal(out.points, hand.points)
    assert info["degenerate"] == 1


def test_step_needs_rng_when_noisy():
    hand = cloud([[0.0, 0, 0.01]])
    with pytest.raises(ConfigError):
        euler_maruyama_step(hand, None, TemplatePrior(hand), plane_surface(), ContactMask([1.0], [1.0]), BridgeConfig(), StageSpec(0.1))


def test_non_finite_update_aborts():
    hand = cloud([[0.0, 0, 0.01]])
    prior = TemplatePrior(cloud([[1e308, 1e308, 1e308]]))
    with pytest.raises(NonFiniteUpdate):
        euler_maruyama_step(hand, None, prior, plane_surface(), ContactMask([0.0], [1.0]), quiet_config(lambda1=1e10), StageSpec(0.1))


def test_noise_stream_is_counter_based():
    a = noise_rng(3, 7).standard_normal((10, 3))
    b = noise_rng(3, 7).standard_normal((10, 3))
    c = noise_rng(3, 8).standard_normal((10, 3))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


# ---------------------------------------------------------------- full runs


@pytest.fixture(scope="module")
def small_scene():
    return make_grasp_scene("sphere", "penetration", 0.005, seed=1, point_count=1024, object_points=2048)


def test_stop_on_huge_epsilon(small_scene):
    _, tr = run_bridge(small_scene, BridgeConfig(epsilon=1e9))
    assert tr.iterations == 1 and tr.stop_reason == STOP_GRADIENT


def test_runs_t_max_without_validity(small_scene):
    cfg = BridgeConfig(epsilon=0.0, check_contact=False, t_max=150)
    _, tr = run_bridge(small_scene, cfg, seed=0)
    assert tr.iterations == 150 and tr.stop_reason == STOP_MAX_ITERS
    assert [r.iteration for r in tr.records] == list(range(1, 151))


def test_sphere_run_reduces_penetration(small_scene):
    out, tr = run_bridge(small_scene, quiet_config())
    assert penetration_depth(out, small_scene.object) < penetration_depth(small_scene.hand, small_scene.object)
    assert tr.stop_reason in (STOP_CONTACT, STOP_GRADIENT, STOP_MAX_ITERS)


def test_trace_stage_ordering_and_annealing(small_scene):
    cfg = BridgeConfig(epsilon=0.0, check_contact=False, t_max=120)
    _, tr = run_bridge(small_scene, cfg, seed=4)
    assert tr.stage_starts == [1, 51]
    assert tr.stage_sigmas[0] > tr.stage_sigmas[1]
    stages = tr.column("stage")
    assert np.all(stages[:50] == 0) and np.all(stages[50:] == 1)
    amp = tr.column("noise_amp")[stages == 1]
    assert np.all(np.diff(amp) <= 0) and amp[0] > 0


def test_reproducible(small_scene):
    cfg = BridgeConfig(t_max=60, check_contact=False)
    a, ta = run_bridge(small_scene, cfg, seed=9)
    b, tb = run_bridge(small_scene, cfg, seed=9)
    c, _ = run_bridge(small_scene, cfg, seed=10)
    assert np.array_equal(a.points, b.points) and ta.to_csv() == tb.to_csv()
    assert not np.array_equal(a.points, c.points)


def test_descent_on_small_scenes():
    for i, kind in enumerate(("sphere", "box", "cylinder")):
        sc = make_grasp_scene(kind, ("gap", "penetration", "none")[i], 0.004, seed=i, point_count=400, object_points=800)
        _, tr = run_bridge(sc, quiet_config(epsilon=0.0, check_contact=False, t_max=40))
        assert np.all(tr.column("U") <= tr.column("U_before"))


def test_prior_limit(small_scene):
    cfg = quiet_config(lambda1=1e6, lambda2=0.0, epsilon=0.0, check_contact=False)
    out, tr = run_bridge(small_scene, cfg, field_template=FieldTemplate(ks=(0.0, 0.0)))
    assert tr.iterations == cfg.t_max
    assert np.abs(out.points - small_scene.prior.reference.points).max() <= 1e-6


def test_zero_mask_is_fixed_point(small_scene):
    sc = Scene(
        small_scene.hand,
        small_scene.object,
        ContactMask(np.zeros(len(small_scene.hand)), np.zeros(len(small_scene.object.cloud))),
        small_scene.prior,
    )
    cfg = quiet_config(lambda1=0.0, epsilon=0.0, check_contact=False, t_max=10)
    out, tr = run_bridge(sc, cfg)
    assert np.array_equal(out.points, small_scene.hand.points)
    assert np.all(tr.column("grad_norm") == 0)


def test_plane_alignment():
    sc = plane_scene()
    cfg = quiet_config(lambda1=0.0, epsilon=0.0, check_contact=False)
    out, _ = run_bridge(sc, cfg, field_template=FieldTemplate(ks=(0.0, 0.0)))
    loss, _, _ = normal_alignment(out, sc.object, sc.mask)
    assert loss / len(out) < 0.05


def test_trace_csv_columns(small_scene):
    _, tr = run_bridge(small_scene, BridgeConfig(t_max=3, check_contact=False))
    lines = tr.to_csv().splitlines()
    assert lines[0].split(",")[:7] == ["iteration", "U", "phi_total", "shape_loss", "normal_loss", "noise_amp", "stage"]
    assert len(lines) == 4 and lines[0].split(",") == list(TRACE_COLUMNS)


# ---------------------------------------------------------------- validity


def test_contact_validity_examples():
    obj = SurfaceModel(
        cloud([[0.0, 0, 0], [0.01, 0, 0]], [[0.0, 0, 1], [0.0, 0, 1]])
    )
    mask = ContactMask([1.0, 1.0], [1.0, 1.0])
    hand = cloud([[0.0, 0, 0.001], [0.01, 0, 0.001]])
    assert contact_validity(hand, obj, mask, tol=0.002)
    hand = cloud([[0.0, 0, 0.001], [0.01, 0, -0.004]])
    assert not contact_validity(hand, obj, mask, tol=0.002)
    hand = cloud([[0.0, 0, 0.001], [0.05, 0, 0.001]])
    assert not contact_validity(hand, obj, mask, tol=0.002)


def brute_validity(hand, obj, mask, tol, pen):
    att = obj.cloud.points[mask.object_weights >= 0.5]
    masked = hand.points[mask.hand_weights >= 0.5]
    for a in att:
        if len(masked) == 0 or np.sqrt(((masked - a) ** 2).sum(axis=1)).min() > tol:
            return False
    return bool(brute_signed_distance(obj, hand.points).min() >= -pen)


def test_contact_validity_matches_brute_force():
    rng = np.random.default_rng(5)
    agree = 0
    for i in range(12):
        sc = make_grasp_scene(("sphere", "box", "cylinder")[i % 3], ("gap", "penetration", "none")[i % 3], 0.002, seed=i, point_count=200, object_points=300)
        hand = sc.hand.with_points(sc.hand.points + rng.normal(0, 0.0005, sc.hand.points.shape))
        for tol in (0.001, 0.003, 0.01):
            got = contact_validity(hand, sc.object, sc.mask, tol)
            assert got == brute_validity(hand, sc.object, sc.mask, tol, tol)
            agree += 1
    assert agree == 36


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigError):
        BridgeConfig(alpha=-1)
    with pytest.raises(ConfigError):
        BridgeConfig(t_max=0)
    with pytest.raises(ConfigError):
        BridgeConfig(stages=[])
    with pytest.raises(ConfigError):
        BridgeConfig(stages=[StageSpec(0.05, max_iters=5), StageSpec(0.2)])
    with pytest.raises(ConfigError):
        StageSpec(0.0)
    with pytest.raises(ConfigError):
        NoiseSchedule(anneal="exponential")


@settings(max_examples=50)
@given(
    st.sampled_from(["constant", "linear-decay", "cosine-decay"]),
    st.floats(0, 1),
    st.floats(0, 1),
    st.floats(0, 1),
)
def test_anneal_non_increasing(anneal, ff, u1, u2):
    ns = NoiseSchedule(g0=1.0, anneal=anneal, final_fraction=ff)
    lo, hi = sorted((u1, u2))
    assert ns.amplitude(hi) <= ns.amplitude(lo)
