import numpy as np
import pytest

from gravitydb.errors import MissingFile, ParseError
from gravitydb.meshio import read_geometry, read_obj, read_ply, write_obj, write_ply
from gravitydb.scenes import box_mesh


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3)).astype(np.float32).astype(np.float64)
    nrm = rng.normal(size=(50, 3))
    nrm = (nrm / np.linalg.norm(nrm, axis=1, keepdims=True)).astype(np.float32).astype(np.float64)
    labels = rng.integers(-1, 6, 50)
    faces = np.array([[0, 1, 2], [2, 3, 4]])
    write_ply(tmp_path / "a.ply", pts, nrm, faces, labels)
    raw = read_ply(tmp_path / "a.ply")
    assert np.array_equal(raw.points, pts)
    assert np.array_equal(raw.normals, nrm)
    assert np.array_equal(raw.labels, labels)
    assert np.array_equal(raw.faces, faces)


def test_ply_is_binary_little_endian_float32(tmp_path):
    write_ply(tmp_path / "a.ply", np.zeros((2, 3)), np.tile([0.0, 0.0, 1.0], (2, 1)))
    header = (tmp_path / "a.ply").read_bytes().split(b"end_header")[0].decode()
    assert "format binary_little_endian 1.0" in header
    for k in ("x", "y", "z", "nx", "ny", "nz"):
        assert f"property float {k}" in header


def test_ascii_ply_with_quads(tmp_path):
    text = """ply
format ascii 1.0
element vertex 4
property float x
property float y
property float z
element face 1
property list uchar int vertex_indices
end_header
0 0 0
1 0 0
1 1 0
0 1 0
4 0 1 2 3
"""
    (tmp_path / "q.ply").write_text(text)
    raw = read_ply(tmp_path / "q.ply")
    assert raw.points.shape == (4, 3) and raw.normals is None
    assert np.array_equal(raw.faces, [[0, 1, 2], [0, 2, 3]])


def test_obj_round_trip(tmp_path):
    v, f = box_mesh((1.0, 2.0, 3.0))
    n = v / np.linalg.norm(v, axis=1, keepdims=True)
    write_obj(tmp_path / "b.obj", v, n, f)
    raw = read_obj(tmp_path / "b.obj")
    assert np.allclose(raw.points, v, atol=1e-8)
    assert np.allclose(raw.normals, n, atol=1e-8)
    assert np.array_equal(raw.faces, f)


def test_obj_negative_indices_and_texture(tmp_path):
    (tmp_path / "c.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf -3/1 -2/1 -1/1\n")
    raw = read_obj(tmp_path / "c.obj")
    assert np.array_equal(raw.faces, [[0, 1, 2]])


def test_errors(tmp_path):
    with pytest.raises(MissingFile):
        read_geometry(tmp_path / "none.ply")
    (tmp_path / "bad.obj").write_text("v 0 zero 0\n")
    with pytest.raises(ParseError):
        read_obj(tmp_path / "bad.obj")
    (tmp_path / "bad.ply").write_text("not a ply")
    with pytest.raises(ParseError):
        read_ply(tmp_path / "bad.ply")
    (tmp_path / "x.stl").write_text("")
    with pytest.raises(ParseError):
        read_geometry(tmp_path / "x.stl")
