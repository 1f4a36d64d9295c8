import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import grid_patch, unit_cube
from cranioshape import spatial
from cranioshape.errors import ValidationError
from cranioshape.mesh import TriMesh

A = np.array([[0.0, 0, 0]])
B = np.array([[1.0, 0, 0]])
C = np.array([[0.0, 1, 0]])


@pytest.mark.parametrize("q,expected,feature", [
    ([0.2, 0.2, 1.0], [0.2, 0.2, 0], spatial.INTERIOR),
    ([-1, -1, 0], [0, 0, 0], spatial.VERT_A),
    ([2, -0.5, 0], [1, 0, 0], spatial.VERT_B),
    ([-0.5, 2, 0], [0, 1, 0], spatial.VERT_C),
    ([0.5, -1, 3], [0.5, 0, 0], spatial.EDGE_AB),
    ([-1, 0.5, 0], [0, 0.5, 0], spatial.EDGE_CA),
    ([1, 1, 0], [0.5, 0.5, 0], spatial.EDGE_BC),
])
def test_voronoi_regions(q, expected, feature):
    pts, feat = spatial.closest_point_on_triangles(np.array([q], float), A, B, C)
    np.testing.assert_allclose(pts[0], expected, atol=1e-15)
    assert feat[0] == feature


def _brute_force(points, mesh):
    v, f = mesh.vertices, mesh.faces
    n = len(points)
    a = np.repeat(v[f[:, 0]][None], n, 0).reshape(-1, 3)
    b = np.repeat(v[f[:, 1]][None], n, 0).reshape(-1, 3)
    c = np.repeat(v[f[:, 2]][None], n, 0).reshape(-1, 3)
    q = np.repeat(points, mesh.n_faces, axis=0)
    p, _ = spatial.closest_point_on_triangles(q, a, b, c)
    return np.linalg.norm(p - q, axis=1).reshape(n, -1).min(axis=1)


@settings(max_examples=20, deadline=None)
@given(hnp.arrays(np.float64, (15, 3), elements=st.floats(-3, 3, allow_nan=False)))
def test_index_matches_brute_force(sphere_mesh, points):
    d, pts, face, _ = spatial.SurfaceIndex(sphere_mesh).query(points)
    np.testing.assert_allclose(d, _brute_force(points, sphere_mesh), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(pts - points, axis=1), d, atol=1e-12)


def test_closest_point_parametric_grid():
    g = grid_patch(5, h=1.0)
    q = np.array([[1.3, 2.7, 5.0], [-2.0, 1.5, 0.0], [10.0, 10.0, -1.0]])
    d, p = spatial.closest_points(q, g)
    np.testing.assert_allclose(p, [[1.3, 2.7, 0], [0, 1.5, 0], [4, 4, 0]], atol=1e-12)
    np.testing.assert_allclose(d, [5.0, 2.0, np.sqrt(73)], atol=1e-12)


def test_points_on_surface_have_zero_distance():
    cube = unit_cube()
    d, _ = spatial.closest_points(cube.vertices, cube)
    assert np.all(d == 0)


def test_exact_tie_reports_lowest_face():
    cube = unit_cube()
    # the cube corner touches three faces' triangles; the lowest index wins
    _, _, face, _ = spatial.SurfaceIndex(cube).query([[-1.0, -1.0, -1.0]])
    touching = [i for i, f in enumerate(cube.faces) if 0 in f]
    assert face[0] == min(touching)


def test_empty_surface_is_rejected():
    with pytest.raises(ValidationError):
        spatial.SurfaceIndex(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)))
