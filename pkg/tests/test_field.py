import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_rotation
from gravitydb.errors import ValidationError
from gravitydb.field import FieldTemplate, GravityFieldSpec, batch_force, force, potential


def single(p=(0.0, 0.0, 0.0), sigma=1.0, k=1.0, w=1.0):
    return GravityFieldSpec([sigma], [k], np.array([p], float), [[w]])


def random_spec(rng, m=None):
    n_scales = int(rng.integers(1, 4))
    m = m or int(rng.integers(1, 30))
    sig = np.sort(rng.uniform(0.01, 0.2, n_scales))[::-1]
    return GravityFieldSpec(sig, rng.uniform(0.1, 2, n_scales), rng.normal(0, 0.05, (m, 3)), rng.random((n_scales, m)))


def fd_gradient(spec, x, h):
    return np.array([(potential(spec, x + h * e) - potential(spec, x - h * e)) / (2 * h) for e in np.eye(3)])


def test_potential_examples():
    p = np.array([0.3, -0.2, 0.1])
    assert potential(single(p), p) == 1.0
    x = p + np.array([0.0, 1.0, 0.0])
    assert potential(single(p), x) == pytest.approx(math.exp(-1.0), rel=1e-15)
    assert potential(single(p, w=0.0), x) == 0.0


def test_force_examples():
    p = np.zeros(3)
    assert np.array_equal(force(single(p), p), np.zeros(3))
    sigma, d = 0.3, 0.1
    spec = single(p, sigma)
    x = np.array([d, 0.0, 0.0])
    closed = (-2 * d / sigma**2) * math.exp(-(d**2) / sigma**2) * np.array([1.0, 0, 0])
    assert np.allclose(force(spec, x), closed, rtol=1e-12)
    assert np.allclose(fd_gradient(spec, x, 1e-5 * sigma), closed, rtol=1e-5)
    two = GravityFieldSpec([1.0], [1.0], np.array([[1.0, 0, 0], [-1.0, 0, 0]]), [[1.0, 1.0]])
    assert np.abs(force(two, np.zeros(3))).max() < 1e-15


def test_force_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(100):
        spec = random_spec(rng)
        x = spec.attractors[rng.integers(len(spec.attractors))] + rng.normal(0, spec.sigmas.min(), 3)
        f = force(spec, x)
        if np.linalg.norm(f) < 1e-6:
            continue
        fd = fd_gradient(spec, x, 1e-5 * spec.sigmas.min())
        assert np.linalg.norm(f - fd) <= 1e-4 * np.linalg.norm(f)


def test_batch_force_exact_path():
    rng = np.random.default_rng(1)
    spec = random_spec(rng, m=25)
    xs = rng.normal(0, 0.1, (100, 3))
    exact = np.array([force(spec, x) for x in xs])
    assert np.allclose(batch_force(spec, xs, cutoff=math.inf), exact, rtol=1e-12, atol=1e-14)


def test_batch_force_cutoff_bound():
    rng = np.random.default_rng(2)
    spec = random_spec(rng, m=300)
    xs = rng.normal(0, 0.3, (2000, 3))
    exact = force(spec, xs)
    cut = batch_force(spec, xs, cutoff=3.0)
    bound = math.exp(-9.0) * sum(2 * k * w.sum() / s for s, k, w in zip(spec.sigmas, spec.ks, spec.weights))
    assert np.linalg.norm(cut - exact, axis=1).max() <= bound


def test_batch_force_far_and_near():
    spec = single((0.0, 0.0, 0.0), sigma=0.01)
    assert np.array_equal(batch_force(spec, np.array([[1.0, 0, 0]])), np.zeros((1, 3)))
    x = np.array([[0.004, 0.002, 0.0]])
    assert np.allclose(batch_force(spec, x, 6.0), force(spec, x), rtol=1e-12, atol=0)
    with pytest.raises(ValidationError):
        batch_force(spec, x, cutoff=2.0)


def test_sparse_path_matches_dense():
    rng = np.random.default_rng(3)
    att = rng.uniform(-0.5, 0.5, (3000, 3))
    spec = GravityFieldSpec([0.02], [1.0], att, rng.random((1, 3000)))
    xs = rng.uniform(-0.5, 0.5, (3000, 3))
    sparse = batch_force(spec, xs, cutoff=6.0)
    dense = np.array([batch_force(spec, x[None], cutoff=6.0)[0] for x in xs[:50]])
    assert np.allclose(sparse[:50], dense, rtol=1e-10, atol=1e-13)


def test_spec_validation():
    with pytest.raises(ValidationError):
        GravityFieldSpec([], [], np.zeros((1, 3)), np.zeros((0, 1)))
    with pytest.raises(ValidationError):
        GravityFieldSpec([0.0], [1.0], np.zeros((1, 3)), [[1.0]])
    with pytest.raises(ValidationError):
        GravityFieldSpec([1.0], [-1.0], np.zeros((1, 3)), [[1.0]])
    with pytest.raises(ValidationError):
        GravityFieldSpec([1.0], [1.0], np.zeros((1, 3)), [[1.5]])
    # a 1-D weight vector is shared by every scale
    spec = GravityFieldSpec([1.0, 0.5], [1.0, 1.0], np.zeros((2, 3)), [0.5, 1.0])
    assert spec.weights.shape == (2, 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_potential_bounds_and_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng)
    xs = rng.normal(0, 0.1, (20, 3))
    phi = potential(spec, xs)
    assert np.all(phi >= 0) and np.all(phi <= spec.peak_bound() * (1 + 1e-12))
    r, t = random_rotation(rng), rng.normal(size=3)
    moved = GravityFieldSpec(spec.sigmas, spec.ks, spec.attractors @ r.T + t, spec.weights)
    assert np.allclose(potential(moved, xs @ r.T + t), phi, rtol=0, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(-8, 8))
def test_k_scaling_is_linear(seed, e):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng)
    xs = rng.normal(0, 0.1, (10, 3))
    c = 2.0**e  # power-of-two factors scale without rounding
    assert np.array_equal(potential(spec.scaled(c), xs), c * potential(spec, xs))
    assert np.array_equal(force(spec.scaled(c), xs), c * force(spec, xs))
    c = float(rng.uniform(0.1, 10))
    assert np.allclose(potential(spec.scaled(c), xs), c * potential(spec, xs), rtol=1e-13, atol=0)


def test_far_field_decay():
    rng = np.random.default_rng(4)
    for _ in range(20):
        spec = random_spec(rng)
        peak = max(2 * k * w.sum() / s for s, k, w in zip(spec.sigmas, spec.ks, spec.weights))
        far = spec.attractors.mean(axis=0) + 10 * spec.sigmas.max() + np.abs(spec.attractors).max() * 2 * np.array([1.0, 0, 0])
        assert np.linalg.norm(force(spec, far)) < 1e-10 * peak


def test_template_normalization():
    tpl = FieldTemplate()
    att = np.zeros((4, 3))
    spec = tpl.for_stage(0.05, att, np.full(4, 0.5))
    assert np.allclose(spec.sigmas, [0.05, 0.025])
    assert np.allclose(spec.ks, spec.sigmas**2 / 2.0)
    off = tpl.for_stage(0.05, att, np.zeros(4))
    assert not off.active
    raw = FieldTemplate(normalize=False).for_stage(0.2, att, np.ones(4))
    assert np.array_equal(raw.ks, [1.0, 1.0])
    with pytest.raises(ValidationError):
        FieldTemplate(cutoff=1.0)


def test_spec_json_round_trip():
    rng = np.random.default_rng(5)
    spec = random_spec(rng)
    back = GravityFieldSpec.from_json(spec.to_json("m0"), spec.attractors, spec.weights)
    assert np.array_equal(back.sigmas, spec.sigmas) and np.array_equal(back.ks, spec.ks)
    assert spec.to_json("m0")["mask_id"] == "m0"
