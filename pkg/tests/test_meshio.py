import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import unit_cube, unit_square
from cranioshape import meshio
from cranioshape.errors import MeshFormatError
from cranioshape.mesh import TriMesh
from cranioshape.scan import LANDMARK_NAMES, LandmarkSet


@pytest.mark.parametrize("name,binary", [("m.obj", True), ("m.ply", True), ("m.ply", False)])
def test_roundtrip_is_exact(tmp_path, small_template, name, binary):
    mesh = small_template.mesh
    path = tmp_path / name
    meshio.save_mesh(mesh, path, binary=binary)
    back = meshio.load_mesh(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.faces, mesh.faces)


@pytest.mark.parametrize("name", ["m.obj", "m.ply"])
def test_roundtrip_keeps_uv(tmp_path, name):
    sq = unit_square()
    mesh = TriMesh(sq.vertices, sq.faces, sq.vertices[:, :2] * 0.5)
    meshio.save_mesh(mesh, tmp_path / name)
    back = meshio.load_mesh(tmp_path / name)
    np.testing.assert_array_equal(back.uv, mesh.uv)


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (8, 3), elements=st.floats(-1e6, 1e6, allow_nan=False, width=64)))
def test_ply_binary_roundtrip_any_coordinates(tmp_path_factory, coords):
    path = tmp_path_factory.mktemp("ply") / "c.ply"
    mesh = TriMesh(coords, unit_cube().faces)
    meshio.save_mesh(mesh, path)
    np.testing.assert_array_equal(meshio.load_mesh(path).vertices, coords)


def test_obj_negative_indices_and_comments(tmp_path):
    p = tmp_path / "neg.obj"
    p.write_text("# triangle\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
    m = meshio.load_mesh(p)
    np.testing.assert_array_equal(m.faces, [[0, 1, 2]])


def test_obj_quad_is_rejected(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(MeshFormatError, match="non-triangular"):
        meshio.load_mesh(p)


def test_obj_malformed_vertex_reports_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 zero 0\n")
    with pytest.raises(MeshFormatError, match=":2:"):
        meshio.load_mesh(p)


def test_ascii_ply_from_hand(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                 "property float z\nelement face 1\nproperty list uchar int vertex_indices\n"
                 "end_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    m = meshio.load_mesh(p)
    assert m.n_vertices == 3 and m.n_faces == 1


def test_truncated_binary_ply(tmp_path, small_template):
    p = tmp_path / "t.ply"
    meshio.save_mesh(small_template.mesh, p)
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(MeshFormatError, match="truncated"):
        meshio.load_mesh(p)


def test_big_endian_ply_unsupported(tmp_path):
    p = tmp_path / "be.ply"
    p.write_bytes(b"ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(MeshFormatError, match="unsupported"):
        meshio.load_mesh(p)


def test_unknown_suffix_and_missing_file(tmp_path):
    with pytest.raises(MeshFormatError):
        meshio.load_mesh(tmp_path / "x.stl")
    with pytest.raises(MeshFormatError):
        meshio.load_mesh(tmp_path / "missing.obj")


def test_landmarks_roundtrip(tmp_path):
    lms = LandmarkSet.from_array(np.arange(30.0).reshape(10, 3) / 7)
    meshio.save_landmarks(lms, tmp_path / "l.json")
    back = meshio.load_landmarks(tmp_path / "l.json")
    np.testing.assert_array_equal(back.array(), lms.array())


def test_landmarks_missing_name(tmp_path):
    doc = {"landmarks": {n: [0, 0, 0] for n in LANDMARK_NAMES[:-1]}}
    (tmp_path / "l.json").write_text(json.dumps(doc))
    with pytest.raises(MeshFormatError, match="gn"):
        meshio.load_landmarks(tmp_path / "l.json")


def test_landmarks_invalid_json(tmp_path):
    (tmp_path / "l.json").write_text("{not json")
    with pytest.raises(MeshFormatError, match="invalid JSON"):
        meshio.load_landmarks(tmp_path / "l.json")


def test_dump_json_sorted_and_stable(tmp_path):
    meshio.dump_json({"b": 1, "a": [0.1, 2]}, tmp_path / "x.json")
    text = (tmp_path / "x.json").read_text()
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [0.1, 2], "b": 1}
