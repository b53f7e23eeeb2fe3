import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_rotation
from gravitydb.contact import (
    ContactMask,
    load_external_mask,
    mean_spacing,
    nearest_point_mask,
    ray_based_mask,
    soft_shoulder,
    write_mask,
)
from gravitydb.errors import CountMismatch, MissingNormals, ParseError, ValidationError
from gravitydb.geometry import OrientedPointCloud, RigidTransform, SurfaceModel
from gravitydb.scenes import make_grasp_scene
from gravitydb.verify import brute_nearest_point_mask, brute_ray_mask


def plane_mesh(half=0.1):
    v = np.array([[-half, -half, 0], [half, -half, 0], [half, half, 0], [-half, half, 0]], float)
    return SurfaceModel(vertices=v, faces=np.array([[0, 1, 2], [0, 2, 3]]))


def test_external_mask_all_ones(tmp_path):
    hand = OrientedPointCloud(np.zeros((3, 3)))
    obj = OrientedPointCloud(np.ones((4, 3)))
    (tmp_path / "m.json").write_text(json.dumps({"hand": [1, 1, 1], "object": [1, 1, 1, 1]}))
    m = load_external_mask(tmp_path / "m.json", hand, obj)
    assert np.all(m.hand_weights == 1) and np.all(m.object_weights == 1) and m.clamped == 0


def test_external_mask_clamps(tmp_path):
    hand = OrientedPointCloud(np.zeros((2, 3)))
    obj = OrientedPointCloud(np.ones((1, 3)))
    (tmp_path / "m.json").write_text(json.dumps({"hand": [1.7, 0.2], "object": [0.5]}))
    m = load_external_mask(tmp_path / "m.json", hand, obj)
    assert m.hand_weights[0] == 1.0 and m.clamped == 1


def test_external_mask_errors(tmp_path):
    hand = OrientedPointCloud(np.zeros((2, 3)))
    obj = OrientedPointCloud(np.ones((1, 3)))
    (tmp_path / "m.json").write_text(json.dumps({"hand": [1.0], "object": [0.5]}))
    with pytest.raises(CountMismatch):
        load_external_mask(tmp_path / "m.json", hand, obj)
    (tmp_path / "n.json").write_text("{")
    with pytest.raises(ParseError):
        load_external_mask(tmp_path / "n.json", hand, obj)


@pytest.mark.parametrize("name", ["mask.json", "maskdir"])
def test_write_read_round_trip(tmp_path, name):
    rng = np.random.default_rng(0)
    hand = OrientedPointCloud(rng.normal(size=(20, 3)))
    obj = OrientedPointCloud(rng.normal(size=(30, 3)))
    m = ContactMask(rng.random(20), rng.random(30), "nearest_point")
    write_mask(m, tmp_path / name)
    back = load_external_mask(tmp_path / name, hand, obj)
    assert np.array_equal(back.hand_weights, m.hand_weights)
    assert np.array_equal(back.object_weights, m.object_weights)


def test_mask_validation():
    with pytest.raises(ValidationError):
        ContactMask([0.5, 2.0], [1.0])
    with pytest.raises(ValidationError):
        ContactMask([0.5], [1.0], provenance="llm")


def test_nearest_mask_examples():
    obj = plane_mesh()
    hand = OrientedPointCloud(np.array([[0.0, 0, 0.005], [0.0, 0, 0.1]]))
    m = nearest_point_mask(hand, obj, tau=0.01, softness=0.01)
    assert m.hand_weights[0] == 1.0
    assert m.hand_weights[1] < 1e-30
    assert soft_shoulder(np.array([0.1]), 0.01, 0.01)[0] == pytest.approx(np.exp(-81.0))


def test_nearest_mask_infinite_tau():
    sc = make_grasp_scene("box", "gap", 0.005, seed=0, point_count=300, object_points=400)
    m = nearest_point_mask(sc.hand, sc.object, tau=np.inf)
    assert np.all(m.hand_weights == 1.0)


def test_ray_mask_examples():
    obj = plane_mesh()
    up = OrientedPointCloud(np.array([[0.0, 0, 0.01]]), np.array([[0.0, 0, 1.0]]))
    assert ray_based_mask(up, obj, 0.05).hand_weights[0] == 1.0
    down = OrientedPointCloud(np.array([[0.0, 0, 0.01]]), np.array([[0.0, 0, -1.0]]))
    assert ray_based_mask(down, obj, 0.05).hand_weights[0] == 0.0
    with pytest.raises(MissingNormals):
        ray_based_mask(OrientedPointCloud(np.zeros((1, 3))), obj)


def test_ray_mask_point_cloud_object():
    g = np.linspace(-0.05, 0.05, 21)
    gx, gy = np.meshgrid(g, g)
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    obj = SurfaceModel(OrientedPointCloud(pts, np.tile([0.0, 0, 1], (len(pts), 1))))
    hand = OrientedPointCloud(np.array([[0.001, 0.001, 0.01]]), np.array([[0.0, 0, 1.0]]))
    m = ray_based_mask(hand, obj, 0.05)
    assert m.hand_weights[0] == 1.0 and m.object_weights.sum() >= 1


def test_masks_match_brute_force():
    rng = np.random.default_rng(1)
    for i in range(4):
        sc = make_grasp_scene(("sphere", "box", "cylinder")[i % 3], "gap", 0.004, seed=i, point_count=150, object_points=300)
        hand = sc.hand.with_points(sc.hand.points + rng.normal(0, 0.003, sc.hand.points.shape))
        m = nearest_point_mask(hand, sc.object, 0.005)
        hw, ow = brute_nearest_point_mask(hand, sc.object, 0.005, 0.0025)
        assert np.array_equal(m.hand_weights, hw) and np.array_equal(m.object_weights, ow)
        r = ray_based_mask(hand, sc.object, 0.05)
        rhw, row = brute_ray_mask(hand, sc.object, 0.05)
        assert np.array_equal(r.hand_weights, rhw) and np.array_equal(r.object_weights, row)


def test_mean_spacing_grid():
    g = np.arange(5.0)
    pts = np.column_stack([g, np.zeros(5), np.zeros(5)])
    assert mean_spacing(pts) == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.001, 0.02), st.floats(1.0, 4.0))
def test_nearest_mask_monotone_in_tau(seed, tau, factor):
    rng = np.random.default_rng(seed)
    obj = plane_mesh()
    hand = OrientedPointCloud(rng.uniform(-0.05, 0.05, (50, 3)))
    a = nearest_point_mask(hand, obj, tau, softness=0.005)
    b = nearest_point_mask(hand, obj, tau * factor, softness=0.005)
    assert np.all(b.hand_weights >= a.hand_weights)
    assert np.all(b.object_weights >= a.object_weights)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_masks_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    sc = make_grasp_scene("box", "gap", 0.003, seed=seed % 7, point_count=120, object_points=200)
    tf = RigidTransform(random_rotation(rng), rng.normal(0, 0.1, 3))
    obj = sc.object
    moved_obj = SurfaceModel(obj.cloud.transformed(tf), tf.apply(obj.vertices), obj.faces)
    moved_hand = sc.hand.transformed(tf)
    a = nearest_point_mask(sc.hand, obj, 0.01)
    b = nearest_point_mask(moved_hand, moved_obj, 0.01)
    assert np.allclose(a.hand_weights, b.hand_weights, atol=1e-9)
    assert np.array_equal(a.object_weights > 0.5, b.object_weights > 0.5)
    ra = ray_based_mask(sc.hand, obj, 0.05)
    rb = ray_based_mask(moved_hand, moved_obj, 0.05)
    assert np.array_equal(ra.hand_weights, rb.hand_weights)
