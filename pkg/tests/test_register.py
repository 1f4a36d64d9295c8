import numpy as np
import pytest
from scipy import sparse
from scipy.spatial.transform import Rotation

from conftest import grid_patch
from cranioshape import mesh as meshops
from cranioshape import register as R
from cranioshape import synth
from cranioshape.errors import NumericalError, ValidationError
from cranioshape.mesh import TriMesh


@pytest.fixture(scope="module")
def ball():
    dirs, faces = synth.sphere_triangulation(120, seed=1)
    return TriMesh(dirs * 50.0, faces)


def _lm_idx(mesh):
    return np.linspace(0, mesh.n_vertices - 1, 10).astype(int)


def test_default_schedule():
    cfg = R.NicpConfig()
    assert cfg.alpha(0) == 1e8
    assert cfg.alpha(3) == pytest.approx(1e8 * 0.8 ** 3)
    assert cfg.beta(50) == 1.0 and cfg.beta(51) == 0.0
    assert cfg.inner_exit_eps == 100.0


@pytest.mark.parametrize("bad", [dict(n_iters=0), dict(alpha_decay=1.5), dict(max_inner=0)])
def test_schedule_validation(bad):
    with pytest.raises(ValidationError):
        R.NicpConfig(**bad)


def test_lbrp_config_validation():
    with pytest.raises(ValidationError):
        R.LbrpConfig(lambda1=0.1, lambda2=1.0)


# ---------------------------------------------------------------------------
# linear algebra

def test_solve_regularised_matches_dense_lstsq(ball):
    inc = meshops.incidence_matrix(ball)
    lap = (inc.T @ inc).tocsr()
    rng = np.random.default_rng(0)
    w = (rng.random(ball.n_vertices) > 0.3).astype(float)
    data = sparse.diags(w)
    y = rng.normal(size=(ball.n_vertices, 3))
    alpha = 0.7
    x = R.solve_regularised(lap, alpha, data, data @ y, 1)
    # oracle: the stacked least-squares problem solved densely
    a = np.vstack([alpha * inc.toarray(), np.diag(w)])
    b = np.vstack([np.zeros((inc.shape[0], 3)), w[:, None] * y])
    ref = np.linalg.lstsq(a, b, rcond=None)[0]
    np.testing.assert_allclose(x, ref, atol=1e-10)


def test_solve_regularised_huge_weight_gives_global_translation(ball):
    # with alpha -> inf every vertex moves by the same vector: the mean data offset
    inc = meshops.incidence_matrix(ball)
    lap = (inc.T @ inc).tocsr()
    rng = np.random.default_rng(1)
    y = rng.normal(size=(ball.n_vertices, 3))
    x = R.solve_regularised(lap, 1e8, sparse.identity(ball.n_vertices), y, 1)
    np.testing.assert_allclose(x, np.tile(y.mean(axis=0), (ball.n_vertices, 1)), atol=1e-9)


def test_solve_regularised_without_data_is_undetermined(ball):
    inc = meshops.incidence_matrix(ball)
    lap = (inc.T @ inc).tocsr()
    zero = sparse.csr_matrix((ball.n_vertices, ball.n_vertices))
    with pytest.raises(NumericalError, match="undetermined"):
        R.solve_regularised(lap, 1.0, zero, np.zeros((ball.n_vertices, 3)), 1)


def test_solve_spd_small_system():
    n = sparse.csr_matrix([[4.0, 1.0], [1.0, 3.0]])
    x = R.solve_spd(n, np.array([[1.0], [2.0]]))
    np.testing.assert_allclose(x.ravel(), [1 / 11, 7 / 11], atol=1e-14)


# ---------------------------------------------------------------------------
# correspondences

def test_boundary_hits_are_invalid():
    target = grid_patch(5)
    probe = grid_patch(3, h=3.0, z=1.0)       # reaches past the target's edge at x, y = 6
    corr = R.find_correspondences(probe, target)
    inside = np.all(probe.vertices[:, :2] < 4, axis=1) & np.all(probe.vertices[:, :2] > 0, axis=1)
    assert np.all(corr.weights[inside] == 1.0)
    assert np.all(corr.weights[~inside] == 0.0)


def test_opposite_normals_are_invalid():
    target = grid_patch(5)
    probe = TriMesh([[1.2, 1.3, 1.0], [2.2, 1.3, 1.0], [1.2, 2.3, 1.0]], [[0, 2, 1]])
    corr = R.find_correspondences(probe, target)
    assert corr.validity_ratio == 0.0
    corr = R.find_correspondences(probe.flipped(), target)
    assert corr.validity_ratio == 1.0
    np.testing.assert_allclose(corr.distances, 1.0)


def test_landmark_vertex_indices_picks_nearest(small_template):
    idx = R.landmark_vertex_indices(small_template.mesh, small_template.landmarks)
    d = np.linalg.norm(small_template.mesh.vertices - small_template.landmarks["gn"], axis=1)
    assert idx[-1] == np.argmin(d)


# ---------------------------------------------------------------------------
# NICP

def _affine_target(mesh):
    a = Rotation.from_euler("xyz", [10, -5, 20], degrees=True).as_matrix() @ np.diag([1.1, 0.9, 1.05])
    return mesh.with_vertices(mesh.vertices @ a.T + [3.0, -4.0, 2.0])


def test_nicp_affine_recovers_global_affine(ball):
    target = _affine_target(ball)
    idx = _lm_idx(ball)
    # stiffness decays slowly, so 60 outer steps still leave some tangential slack
    cfg = R.NicpConfig(n_iters=60)
    res = R.nicp_affine(ball, target, idx, target.vertices[idx], cfg, check_monotone=True)
    assert R.v2nn_distance(res.morphed, target) < 0.01
    assert np.abs(res.morphed.vertices - target.vertices).max() < 0.3
    assert R.landmark_error(res.morphed, idx, target.vertices[idx]) < 0.2


def test_nicp_affine_identity_stays_put(ball):
    idx = _lm_idx(ball)
    res = R.nicp_affine(ball, ball, idx, ball.vertices[idx], R.NicpConfig(n_iters=5))
    np.testing.assert_allclose(res.morphed.vertices, ball.vertices, atol=1e-8)
    assert res.diagnostics[-1]["change"] < 100
    assert res.summary()["method"] == "nicp-a"


def test_nicp_translation_follows_translated_target(ball):
    target = ball.with_vertices(ball.vertices + [2.0, 0.5, -1.0])
    idx = _lm_idx(ball)
    res = R.nicp_translation(ball, target, idx, target.vertices[idx], R.NicpConfig(n_iters=20),
                             check_monotone=True)
    np.testing.assert_allclose(res.morphed.vertices, target.vertices, atol=1e-3)


def test_nicp_respects_max_inner(ball):
    target = _affine_target(ball)
    idx = _lm_idx(ball)
    cfg = R.NicpConfig(n_iters=2, max_inner=3, inner_exit_eps=1e-30)
    res = R.nicp_affine(ball, target, idx, target.vertices[idx], cfg)
    assert len(res.diagnostics) == 6


def test_nicp_requires_landmarks(ball):
    with pytest.raises(ValidationError):
        R.nicp_affine(ball, ball, None, None)


def test_two_stage_lbrp_moves_onto_scaled_sphere(ball):
    target = ball.with_vertices(ball.vertices * 1.04)
    res = R.two_stage_lbrp(ball, target)
    assert [d["stage"] for d in res.diagnostics] == [1, 2]
    assert R.v2nn_distance(res.morphed, target) < 0.2 * R.v2nn_distance(ball, target)


def test_lbrp_pins_landmarks(ball):
    target = ball.with_vertices(ball.vertices * 1.04)
    idx = _lm_idx(ball)
    goal = target.vertices[idx] + [0.0, 0.0, 0.5]
    res = R.two_stage_lbrp(ball, target, idx, goal)
    assert R.landmark_error(res.morphed, idx, goal) < 0.5


# ---------------------------------------------------------------------------
# metrics

def test_landmark_error_by_hand():
    m = TriMesh(np.zeros((10, 3)) + np.arange(10)[:, None] * [1, 0, 0], np.zeros((0, 3), int))
    target = m.vertices + [3.0, 4.0, 0.0]
    assert R.landmark_error(m, np.arange(10), target) == pytest.approx(5.0)
    with pytest.raises(ValidationError):
        R.landmark_error(m, np.arange(3), target[:3])


def test_v2nn_zero_on_itself(ball):
    assert R.v2nn_distance(ball, ball) == 0.0


def test_normal_deviation_zero_for_rigid_copies(ball):
    rot = Rotation.from_euler("z", 30, degrees=True).as_matrix()
    copies = [ball, ball.with_vertices(ball.vertices @ rot.T + 5)]
    assert R.surface_normal_deviation({"a": copies}) == pytest.approx(0.0, abs=1e-6)
    assert R.surface_normal_deviation({"a": copies}, align=False) > 1.0


def test_normal_deviation_skips_singletons(ball):
    with pytest.warns(RuntimeWarning, match="< 2 members"):
        mean, per = R.surface_normal_deviation({"a": [ball, ball], "b": [ball]}, per_class=True)
    assert list(per) == ["a"] and mean == pytest.approx(0.0, abs=1e-6)
